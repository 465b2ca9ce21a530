#include "panfm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "panfm/kernels.hpp"
#include "panfm/util.hpp"

namespace panfm {

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_numel(const std::vector<int>& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::shared_ptr<TensorImpl> make_impl(std::vector<int> shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value.assign(static_cast<size_t>(shape_numel(impl->shape)), 0.0);
  impl->requires_grad = requires_grad;
  return impl;
}

bool any_requires(std::initializer_list<const Tensor*> ts) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : ts)
    if (t->impl()->requires_grad) return true;
  return false;
}

// Creates the output node of an op. When grad is on and an input needs it,
// wires inputs + backward closure; otherwise the output is a plain
// constant.
Tensor make_op(std::vector<int> shape, std::initializer_list<const Tensor*> inputs,
               std::function<void(TensorImpl&)> backward) {
  const bool rg = any_requires(inputs);
  auto impl = make_impl(std::move(shape), rg);
  if (rg) {
    for (const Tensor* t : inputs) impl->inputs.push_back(t->impl());
    impl->backward_fn = std::move(backward);
  }
  return Tensor(std::move(impl));
}

void accumulate(TensorImpl& dst, const double* g, int64_t n) {
  dst.ensure_grad();
  for (int64_t i = 0; i < n; ++i) dst.grad[static_cast<size_t>(i)] += g[i];
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  std::fill(impl->value.begin(), impl->value.end(), v);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  PF_CHECK(shape_numel(shape) == static_cast<int64_t>(data.size()),
           "from_data: shape ", shape_str(shape), " does not match data length ", data.size());
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

int Tensor::rows() const {
  PF_CHECK(rank() >= 1 && rank() <= 2, "rows: rank-1 or rank-2 expected, got ",
           shape_str(impl_->shape));
  return rank() == 2 ? impl_->shape[0] : 1;
}

int Tensor::cols() const {
  PF_CHECK(rank() >= 1 && rank() <= 2, "cols: rank-1 or rank-2 expected, got ",
           shape_str(impl_->shape));
  return rank() == 2 ? impl_->shape[1] : impl_->shape[0];
}

double Tensor::item() const {
  PF_CHECK(numel() == 1, "item: tensor has ", numel(), " elements");
  return impl_->value[0];
}

std::span<const double> Tensor::grad() const {
  PF_CHECK(!impl_->grad.empty(), "grad: no gradient buffer (did backward run?)");
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.assign(impl_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->value = impl_->value;
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

void Tensor::backward() const {
  PF_CHECK(numel() == 1, "backward: loss must be a scalar, got shape ", shape_str(impl_->shape));
  // Iterative post-order DFS; inputs visited in recorded order so traversal
  // is deterministic for a given graph.
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> seen;
  struct Frame {
    TensorImpl* node;
    size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_.get(), 0});
  seen.insert(impl_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_input < f.node->inputs.size()) {
      TensorImpl* child = f.node->inputs[f.next_input++].get();
      if (seen.insert(child).second) stack.push_back({child, 0});
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }
  for (TensorImpl* node : topo)
    if (node->requires_grad) node->ensure_grad();
  impl_->ensure_grad();
  impl_->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

Tensor unary_op(const Tensor& a, std::vector<double> out,
                std::function<void(TensorImpl&, TensorImpl&)> bw) {
  auto ain = a.impl();
  Tensor y = make_op(a.shape(), {&a}, [ain, bw](TensorImpl& self) { bw(self, *ain); });
  std::copy(out.begin(), out.end(), y.impl()->value.begin());
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  PF_CHECK(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()), " vs ",
           shape_str(b.shape()));
  auto ai = a.impl(), bi = b.impl();
  Tensor y = make_op(a.shape(), {&a, &b}, [ai, bi](TensorImpl& self) {
    accumulate(*ai, self.grad.data(), self.numel());
    accumulate(*bi, self.grad.data(), self.numel());
  });
  auto& out = y.impl()->value;
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = ai->value[i] + bi->value[i];
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  PF_CHECK(a.shape() == b.shape(), "sub: shape mismatch ", shape_str(a.shape()), " vs ",
           shape_str(b.shape()));
  auto ai = a.impl(), bi = b.impl();
  Tensor y = make_op(a.shape(), {&a, &b}, [ai, bi](TensorImpl& self) {
    ai->ensure_grad();
    bi->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) {
      ai->grad[i] += self.grad[i];
      bi->grad[i] -= self.grad[i];
    }
  });
  auto& out = y.impl()->value;
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = ai->value[i] - bi->value[i];
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  PF_CHECK(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()), " vs ",
           shape_str(b.shape()));
  auto ai = a.impl(), bi = b.impl();
  Tensor y = make_op(a.shape(), {&a, &b}, [ai, bi](TensorImpl& self) {
    ai->ensure_grad();
    bi->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) {
      ai->grad[i] += self.grad[i] * bi->value[i];
      bi->grad[i] += self.grad[i] * ai->value[i];
    }
  });
  auto& out = y.impl()->value;
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = ai->value[i] * bi->value[i];
  return y;
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  return unary_op(a, std::move(out), [](TensorImpl& self, TensorImpl& in) {
    accumulate(in, self.grad.data(), self.numel());
  });
}

Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return unary_op(a, std::move(out), [s](TensorImpl& self, TensorImpl& in) {
    in.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) in.grad[i] += self.grad[i] * s;
  });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::exp(a.data()[i]);
  return unary_op(a, std::move(out), [](TensorImpl& self, TensorImpl& in) {
    in.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) in.grad[i] += self.grad[i] * self.value[i];
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::log(std::max(a.data()[i], 1e-12));
  return unary_op(a, std::move(out), [](TensorImpl& self, TensorImpl& in) {
    in.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      in.grad[i] += self.grad[i] / std::max(in.value[i], 1e-12);
  });
}

Tensor sqrt(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::sqrt(a.data()[i]);
  return unary_op(a, std::move(out), [](TensorImpl& self, TensorImpl& in) {
    in.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      in.grad[i] += self.grad[i] * 0.5 / self.value[i];
  });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * a.data()[i];
  return unary_op(a, std::move(out), [](TensorImpl& self, TensorImpl& in) {
    in.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) in.grad[i] += self.grad[i] * 2.0 * in.value[i];
  });
}

Tensor pow_scalar(const Tensor& a, double p) {
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::pow(a.data()[i], p);
  return unary_op(a, std::move(out), [p](TensorImpl& self, TensorImpl& in) {
    if (p == 0.0) return;  // constant one, zero gradient
    in.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      in.grad[i] += self.grad[i] * p * std::pow(in.value[i], p - 1.0);
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return unary_op(a, std::move(out), [](TensorImpl& self, TensorImpl& in) {
    in.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      in.grad[i] += self.grad[i] * self.value[i] * (1.0 - self.value[i]);
  });
}

Tensor gelu(const Tensor& a) {
  // exact form: x * Phi(x)
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  }
  return unary_op(a, std::move(out), [](TensorImpl& self, TensorImpl& in) {
    in.ensure_grad();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (int64_t i = 0; i < self.numel(); ++i) {
      const double x = in.value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      in.grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::max(a.data()[i], 0.0);
  return unary_op(a, std::move(out), [](TensorImpl& self, TensorImpl& in) {
    in.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      if (in.value[i] > 0.0) in.grad[i] += self.grad[i];
  });
}

Tensor clamp_min(const Tensor& a, double lo) {
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::max(a.data()[i], lo);
  return unary_op(a, std::move(out), [lo](TensorImpl& self, TensorImpl& in) {
    in.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      if (in.value[i] >= lo) in.grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// broadcast

namespace {

void check_rowvec(const Tensor& a, const Tensor& v, const char* op) {
  PF_CHECK(a.rank() == 2 && v.rank() == 1 && a.shape()[1] == v.shape()[0], op,
           ": expected [m x n] and [n], got ", shape_str(a.shape()), " and ",
           shape_str(v.shape()));
}

}  // namespace

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  check_rowvec(a, v, "add_rowvec");
  const int m = a.shape()[0], n = a.shape()[1];
  auto ai = a.impl(), vi = v.impl();
  Tensor y = make_op(a.shape(), {&a, &v}, [ai, vi, m, n](TensorImpl& self) {
    accumulate(*ai, self.grad.data(), self.numel());
    vi->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) vi->grad[j] += self.grad[static_cast<size_t>(i) * n + j];
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(i) * n + j] = ai->value[static_cast<size_t>(i) * n + j] + vi->value[j];
  return y;
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  check_rowvec(a, v, "mul_rowvec");
  const int m = a.shape()[0], n = a.shape()[1];
  auto ai = a.impl(), vi = v.impl();
  Tensor y = make_op(a.shape(), {&a, &v}, [ai, vi, m, n](TensorImpl& self) {
    ai->ensure_grad();
    vi->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        ai->grad[idx] += self.grad[idx] * vi->value[j];
        vi->grad[j] += self.grad[idx] * ai->value[idx];
      }
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const size_t idx = static_cast<size_t>(i) * n + j;
      out[idx] = ai->value[idx] * vi->value[j];
    }
  return y;
}

Tensor div_rowvec(const Tensor& a, const Tensor& v) {
  check_rowvec(a, v, "div_rowvec");
  const int m = a.shape()[0], n = a.shape()[1];
  auto ai = a.impl(), vi = v.impl();
  Tensor y = make_op(a.shape(), {&a, &v}, [ai, vi, m, n](TensorImpl& self) {
    ai->ensure_grad();
    vi->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        const double d = vi->value[j];
        ai->grad[idx] += self.grad[idx] / d;
        vi->grad[j] -= self.grad[idx] * ai->value[idx] / (d * d);
      }
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const size_t idx = static_cast<size_t>(i) * n + j;
      out[idx] = ai->value[idx] / vi->value[j];
    }
  return y;
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  PF_CHECK(a.rank() == 2 && s.rank() == 1 && a.shape()[0] == s.shape()[0],
           "scale_rows: expected [m x n] and [m], got ", shape_str(a.shape()), " and ",
           shape_str(s.shape()));
  const int m = a.shape()[0], n = a.shape()[1];
  auto ai = a.impl(), si = s.impl();
  Tensor y = make_op(a.shape(), {&a, &s}, [ai, si, m, n](TensorImpl& self) {
    ai->ensure_grad();
    si->ensure_grad();
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      for (int j = 0; j < n; ++j) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        ai->grad[idx] += self.grad[idx] * si->value[i];
        acc += self.grad[idx] * ai->value[idx];
      }
      si->grad[i] += acc;
    }
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const size_t idx = static_cast<size_t>(i) * n + j;
      out[idx] = ai->value[idx] * si->value[i];
    }
  return y;
}

Tensor broadcast_row(const Tensor& v, int m) {
  PF_CHECK(v.rank() == 1, "broadcast_row: expected rank-1, got ", shape_str(v.shape()));
  const int n = v.shape()[0];
  auto vi = v.impl();
  Tensor y = make_op({m, n}, {&v}, [vi, m, n](TensorImpl& self) {
    vi->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) vi->grad[j] += self.grad[static_cast<size_t>(i) * n + j];
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i)
    std::copy(vi->value.begin(), vi->value.end(), out.begin() + static_cast<size_t>(i) * n);
  return y;
}

// ---------------------------------------------------------------------------
// structure

Tensor matmul(const Tensor& a, const Tensor& b) {
  PF_CHECK(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required, got ",
           shape_str(a.shape()), " and ", shape_str(b.shape()));
  PF_CHECK(a.shape()[1] == b.shape()[0], "matmul: inner dimensions disagree: ",
           shape_str(a.shape()), " x ", shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto ai = a.impl(), bi = b.impl();
  Tensor y = make_op({m, n}, {&a, &b}, [ai, bi, m, k, n](TensorImpl& self) {
    ai->ensure_grad();
    bi->ensure_grad();
    // dA += dC B^T ; dB += A^T dC
    kernels::matmul_nt_acc(self.grad.data(), bi->value.data(), ai->grad.data(), m, n, k);
    kernels::matmul_tn_acc(ai->value.data(), self.grad.data(), bi->grad.data(), k, m, n);
  });
  kernels::matmul(ai->value.data(), bi->value.data(), y.impl()->value.data(), m, k, n);
  return y;
}

Tensor transpose(const Tensor& a) {
  PF_CHECK(a.rank() == 2, "transpose: rank-2 required, got ", shape_str(a.shape()));
  const int m = a.shape()[0], n = a.shape()[1];
  auto ai = a.impl();
  Tensor y = make_op({n, m}, {&a}, [ai, m, n](TensorImpl& self) {
    ai->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j)
        ai->grad[static_cast<size_t>(j) * n + i] += self.grad[static_cast<size_t>(i) * m + j];
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = ai->value[static_cast<size_t>(i) * n + j];
  return y;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  PF_CHECK(shape_numel(shape) == a.numel(), "reshape: element count mismatch ",
           shape_str(a.shape()), " -> ", shape_str(shape));
  auto ai = a.impl();
  Tensor y = make_op(shape, {&a}, [ai](TensorImpl& self) {
    accumulate(*ai, self.grad.data(), self.numel());
  });
  std::copy(ai->value.begin(), ai->value.end(), y.impl()->value.begin());
  return y;
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  PF_CHECK(a.rank() == 2, "slice_rows: rank-2 required");
  PF_CHECK(0 <= r0 && r0 < r1 && r1 <= a.shape()[0], "slice_rows: bad range [", r0, ", ", r1,
           ") for ", shape_str(a.shape()));
  const int n = a.shape()[1];
  auto ai = a.impl();
  Tensor y = make_op({r1 - r0, n}, {&a}, [ai, r0, n](TensorImpl& self) {
    ai->ensure_grad();
    const int64_t cnt = self.numel();
    for (int64_t i = 0; i < cnt; ++i)
      ai->grad[static_cast<size_t>(r0) * n + i] += self.grad[i];
  });
  std::copy(ai->value.begin() + static_cast<size_t>(r0) * n,
            ai->value.begin() + static_cast<size_t>(r1) * n, y.impl()->value.begin());
  return y;
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  PF_CHECK(a.rank() == 2, "slice_cols: rank-2 required");
  PF_CHECK(0 <= c0 && c0 < c1 && c1 <= a.shape()[1], "slice_cols: bad range [", c0, ", ", c1,
           ") for ", shape_str(a.shape()));
  const int m = a.shape()[0], n = a.shape()[1], w = c1 - c0;
  auto ai = a.impl();
  Tensor y = make_op({m, w}, {&a}, [ai, c0, m, n, w](TensorImpl& self) {
    ai->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        ai->grad[static_cast<size_t>(i) * n + c0 + j] += self.grad[static_cast<size_t>(i) * w + j];
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<size_t>(i) * w + j] = ai->value[static_cast<size_t>(i) * n + c0 + j];
  return y;
}

Tensor take_rows_strided(const Tensor& a, int offset, int stride, int count) {
  PF_CHECK(a.rank() == 2, "take_rows_strided: rank-2 required");
  const int m = a.shape()[0], n = a.shape()[1];
  PF_CHECK(stride >= 1 && count >= 1 && offset >= 0 &&
               offset + static_cast<int64_t>(count - 1) * stride < m,
           "take_rows_strided: rows out of range for ", shape_str(a.shape()));
  auto ai = a.impl();
  Tensor y = make_op({count, n}, {&a}, [ai, offset, stride, count, n](TensorImpl& self) {
    ai->ensure_grad();
    for (int r = 0; r < count; ++r) {
      const size_t src = static_cast<size_t>(r) * n;
      const size_t dst = (static_cast<size_t>(offset) + static_cast<size_t>(r) * stride) * n;
      for (int j = 0; j < n; ++j) ai->grad[dst + j] += self.grad[src + j];
    }
  });
  auto& out = y.impl()->value;
  for (int r = 0; r < count; ++r) {
    const size_t src = (static_cast<size_t>(offset) + static_cast<size_t>(r) * stride) * n;
    std::copy(ai->value.begin() + src, ai->value.begin() + src + n,
              out.begin() + static_cast<size_t>(r) * n);
  }
  return y;
}

namespace {

// parts may be rank-1 [n] (one row) or rank-2 [r x n]
int part_rows(const Tensor& t) { return t.rank() == 2 ? t.shape()[0] : 1; }
int part_cols(const Tensor& t) { return t.rank() == 2 ? t.shape()[1] : t.shape()[0]; }

}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) {
  PF_CHECK(!parts.empty(), "concat_rows: no parts");
  const int n = part_cols(parts[0]);
  int m = 0;
  for (const Tensor& p : parts) {
    PF_CHECK(part_cols(p) == n, "concat_rows: column mismatch ", shape_str(p.shape()));
    m += part_rows(p);
  }
  bool rg = false;
  if (g_grad_enabled)
    for (const Tensor& p : parts)
      if (p.requires_grad()) rg = true;
  auto impl = make_impl({m, n}, rg);
  std::vector<std::shared_ptr<TensorImpl>> ins;
  ins.reserve(parts.size());
  for (const Tensor& p : parts) ins.push_back(p.impl());
  size_t off = 0;
  for (const auto& p : ins) {
    std::copy(p->value.begin(), p->value.end(), impl->value.begin() + off);
    off += p->value.size();
  }
  if (rg) {
    impl->inputs = ins;
    impl->backward_fn = [ins](TensorImpl& self) {
      size_t pos = 0;
      for (const auto& p : ins) {
        p->ensure_grad();
        for (size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[pos + i];
        pos += p->value.size();
      }
    };
  }
  return Tensor(std::move(impl));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  PF_CHECK(!parts.empty(), "concat_cols: no parts");
  std::vector<Tensor> t;
  t.reserve(parts.size());
  for (const Tensor& p : parts) t.push_back(transpose(p));
  return transpose(concat_rows(t));
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum_all(const Tensor& a) {
  auto ai = a.impl();
  Tensor y = make_op({1}, {&a}, [ai](TensorImpl& self) {
    ai->ensure_grad();
    const double g = self.grad[0];
    for (auto& v : ai->grad) v += g;
  });
  double acc = 0.0;
  for (double v : ai->value) acc += v;
  y.impl()->value[0] = acc;
  return y;
}

Tensor mean_all(const Tensor& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor row_sum(const Tensor& a) {
  PF_CHECK(a.rank() == 2, "row_sum: rank-2 required");
  const int m = a.shape()[0], n = a.shape()[1];
  auto ai = a.impl();
  Tensor y = make_op({m}, {&a}, [ai, m, n](TensorImpl& self) {
    ai->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ai->grad[static_cast<size_t>(i) * n + j] += self.grad[i];
  });
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int j = 0; j < n; ++j) acc += ai->value[static_cast<size_t>(i) * n + j];
    y.impl()->value[i] = acc;
  }
  return y;
}

Tensor row_mean(const Tensor& a) {
  return mul_scalar(row_sum(a), 1.0 / static_cast<double>(a.shape()[1]));
}

Tensor col_sum(const Tensor& a) {
  PF_CHECK(a.rank() == 2, "col_sum: rank-2 required");
  const int m = a.shape()[0], n = a.shape()[1];
  auto ai = a.impl();
  Tensor y = make_op({n}, {&a}, [ai, m, n](TensorImpl& self) {
    ai->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ai->grad[static_cast<size_t>(i) * n + j] += self.grad[j];
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j] += ai->value[static_cast<size_t>(i) * n + j];
  return y;
}

Tensor col_mean(const Tensor& a) {
  return mul_scalar(col_sum(a), 1.0 / static_cast<double>(a.shape()[0]));
}

// ---------------------------------------------------------------------------
// row-wise normalizations

namespace {

struct RowView {
  int m, n;
};

RowView row_view(const Tensor& a, const char* op) {
  PF_CHECK(a.rank() == 1 || a.rank() == 2, op, ": rank-1 or rank-2 required, got ",
           shape_str(a.shape()));
  if (a.rank() == 1) return {1, a.shape()[0]};
  return {a.shape()[0], a.shape()[1]};
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  const auto [m, n] = row_view(a, "softmax_rows");
  auto ai = a.impl();
  Tensor y = make_op(a.shape(), {&a}, [ai, m, n](TensorImpl& self) {
    ai->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* yv = self.value.data() + static_cast<size_t>(i) * n;
      const double* gy = self.grad.data() + static_cast<size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += gy[j] * yv[j];
      double* ga = ai->grad.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ga[j] += yv[j] * (gy[j] - dot);
    }
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i) {
    const double* x = ai->value.data() + static_cast<size_t>(i) * n;
    double* o = out.data() + static_cast<size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    PF_CHECK(std::isfinite(mx), "softmax: non-finite input");
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      o[j] = std::exp(x[j] - mx);
      z += o[j];
    }
    for (int j = 0; j < n; ++j) o[j] /= z;
  }
  return y;
}

Tensor log_softmax_rows(const Tensor& a) {
  const auto [m, n] = row_view(a, "log_softmax_rows");
  auto ai = a.impl();
  Tensor y = make_op(a.shape(), {&a}, [ai, m, n](TensorImpl& self) {
    ai->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* yv = self.value.data() + static_cast<size_t>(i) * n;
      const double* gy = self.grad.data() + static_cast<size_t>(i) * n;
      double gs = 0.0;
      for (int j = 0; j < n; ++j) gs += gy[j];
      double* ga = ai->grad.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ga[j] += gy[j] - std::exp(yv[j]) * gs;
    }
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i) {
    const double* x = ai->value.data() + static_cast<size_t>(i) * n;
    double* o = out.data() + static_cast<size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    PF_CHECK(std::isfinite(mx), "log_softmax: non-finite input");
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lz = mx + std::log(z);
    for (int j = 0; j < n; ++j) o[j] = x[j] - lz;
  }
  return y;
}

Tensor logsumexp_rows(const Tensor& a) {
  PF_CHECK(a.rank() == 2, "logsumexp_rows: rank-2 required");
  const int m = a.shape()[0], n = a.shape()[1];
  auto ai = a.impl();
  Tensor y = make_op({m}, {&a}, [ai, m, n](TensorImpl& self) {
    ai->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* x = ai->value.data() + static_cast<size_t>(i) * n;
      double* ga = ai->grad.data() + static_cast<size_t>(i) * n;
      const double lse = self.value[i], g = self.grad[i];
      for (int j = 0; j < n; ++j) ga[j] += g * std::exp(x[j] - lse);
    }
  });
  for (int i = 0; i < m; ++i) {
    const double* x = ai->value.data() + static_cast<size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    y.impl()->value[i] = mx + std::log(z);
  }
  return y;
}

Tensor softmax(const Tensor& a, int axis) {
  if (a.rank() == 1) {
    PF_CHECK(axis == 0, "softmax: axis ", axis, " invalid for rank-1");
    return softmax_rows(a);
  }
  PF_CHECK(a.rank() == 2 && (axis == 0 || axis == 1), "softmax: axis ", axis, " invalid for ",
           shape_str(a.shape()));
  if (axis == 1) return softmax_rows(a);
  return transpose(softmax_rows(transpose(a)));
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  const auto [m, n] = row_view(a, "layer_norm");
  PF_CHECK(gain.rank() == 1 && gain.shape()[0] == n && bias.rank() == 1 && bias.shape()[0] == n,
           "layer_norm: gain/bias must match normalized width ", n, ", got ",
           shape_str(gain.shape()), " and ", shape_str(bias.shape()));
  auto ai = a.impl(), gi = gain.impl(), bi = bias.impl();
  Tensor y = make_op(a.shape(), {&a, &gain, &bias}, [ai, gi, bi, m, n, eps](TensorImpl& self) {
    ai->ensure_grad();
    gi->ensure_grad();
    bi->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* x = ai->value.data() + static_cast<size_t>(i) * n;
      const double* gy = self.grad.data() + static_cast<size_t>(i) * n;
      double mu = 0.0;
      for (int j = 0; j < n; ++j) mu += x[j];
      mu /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps);
      // dxh = gy * gain; then standard layer-norm backward
      double sum_dxh = 0.0, sum_dxh_xh = 0.0;
      for (int j = 0; j < n; ++j) {
        const double xh = (x[j] - mu) * inv;
        const double dxh = gy[j] * gi->value[j];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh;
        gi->grad[j] += gy[j] * xh;
        bi->grad[j] += gy[j];
      }
      double* ga = ai->grad.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double xh = (x[j] - mu) * inv;
        const double dxh = gy[j] * gi->value[j];
        ga[j] += inv * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
      }
    }
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i) {
    const double* x = ai->value.data() + static_cast<size_t>(i) * n;
    double* o = out.data() + static_cast<size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) o[j] = (x[j] - mu) * inv * gi->value[j] + bi->value[j];
  }
  return y;
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  const auto [m, n] = row_view(a, "l2_normalize_rows");
  auto ai = a.impl();
  Tensor y = make_op(a.shape(), {&a, }, [ai, m, n, eps](TensorImpl& self) {
    ai->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* x = ai->value.data() + static_cast<size_t>(i) * n;
      const double* yv = self.value.data() + static_cast<size_t>(i) * n;
      const double* gy = self.grad.data() + static_cast<size_t>(i) * n;
      double r = 0.0;
      for (int j = 0; j < n; ++j) r += x[j] * x[j];
      r = std::max(std::sqrt(r), eps);
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += gy[j] * yv[j];
      double* ga = ai->grad.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ga[j] += (gy[j] - yv[j] * dot) / r;
    }
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i) {
    const double* x = ai->value.data() + static_cast<size_t>(i) * n;
    double* o = out.data() + static_cast<size_t>(i) * n;
    double r = 0.0;
    for (int j = 0; j < n; ++j) r += x[j] * x[j];
    r = std::max(std::sqrt(r), eps);
    for (int j = 0; j < n; ++j) o[j] = x[j] / r;
  }
  return y;
}

// ---------------------------------------------------------------------------
// fused network ops

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  PF_CHECK(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "linear: expected [m x d], [d x k], [k]");
  PF_CHECK(x.shape()[1] == w.shape()[0] && w.shape()[1] == b.shape()[0],
           "linear: dimension mismatch ", shape_str(x.shape()), " x ", shape_str(w.shape()),
           " + ", shape_str(b.shape()));
  const int m = x.shape()[0], d = x.shape()[1], k = w.shape()[1];
  auto xi = x.impl(), wi = w.impl(), bi = b.impl();
  Tensor y = make_op({m, k}, {&x, &w, &b}, [xi, wi, bi, m, d, k](TensorImpl& self) {
    xi->ensure_grad();
    wi->ensure_grad();
    bi->ensure_grad();
    kernels::matmul_nt_acc(self.grad.data(), wi->value.data(), xi->grad.data(), m, k, d);
    kernels::matmul_tn_acc(xi->value.data(), self.grad.data(), wi->grad.data(), d, m, k);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j) bi->grad[j] += self.grad[static_cast<size_t>(i) * k + j];
  });
  auto& out = y.impl()->value;
  for (int i = 0; i < m; ++i)
    std::copy(bi->value.begin(), bi->value.end(), out.begin() + static_cast<size_t>(i) * k);
  kernels::matmul_acc(xi->value.data(), wi->value.data(), out.data(), m, d, k);
  return y;
}

void AttentionCaptureBatch::init(int B, int L, int H, int S, bool full_matrices) {
  batch = B;
  layers = L;
  heads = H;
  seq = S;
  want_full = full_matrices;
  cls_rows.assign(B, std::vector<std::vector<std::vector<double>>>(
                         L, std::vector<std::vector<double>>(H)));
  if (full_matrices)
    full.assign(B, std::vector<std::vector<double>>(L));
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch, int seq,
                           int heads, double scale, AttentionCaptureBatch* capture, int layer) {
  PF_CHECK(q.shape() == k.shape() && k.shape() == v.shape() && q.rank() == 2,
           "multihead_attention: q/k/v shapes must match");
  const int rows = q.shape()[0], d = q.shape()[1];
  PF_CHECK(rows == batch * seq, "multihead_attention: rows ", rows, " != batch*seq ",
           batch * seq);
  PF_CHECK(d % heads == 0, "multihead_attention: width ", d, " not divisible by ", heads, " heads");
  const int dh = d / heads;

  auto qi = q.impl(), ki = k.impl(), vi = v.impl();
  // Post-softmax attention [batch][head][seq x seq], kept for backward.
  auto attn = std::make_shared<std::vector<double>>(
      static_cast<size_t>(batch) * heads * seq * seq, 0.0);

  Tensor y = make_op({rows, d}, {&q, &k, &v},
                     [qi, ki, vi, attn, batch, seq, heads, dh, d, scale](TensorImpl& self) {
    qi->ensure_grad();
    ki->ensure_grad();
    vi->ensure_grad();
#pragma omp parallel for schedule(static) collapse(2) if (batch * heads > 1)
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const size_t base = static_cast<size_t>(b) * seq * d + static_cast<size_t>(h) * dh;
        const double* a = attn->data() + (static_cast<size_t>(b) * heads + h) * seq * seq;
        std::vector<double> da(static_cast<size_t>(seq) * seq);
        // dV[j] += sum_i A[i][j] * dOut[i]; dA[i][j] = dOut[i] . V[j]
        for (int i = 0; i < seq; ++i) {
          const double* go = self.grad.data() + base + static_cast<size_t>(i) * d;
          for (int j = 0; j < seq; ++j) {
            const double* vj = vi->value.data() + base + static_cast<size_t>(j) * d;
            double acc = 0.0;
            for (int c = 0; c < dh; ++c) acc += go[c] * vj[c];
            da[static_cast<size_t>(i) * seq + j] = acc;
          }
        }
        for (int j = 0; j < seq; ++j) {
          double* gv = vi->grad.data() + base + static_cast<size_t>(j) * d;
          for (int i = 0; i < seq; ++i) {
            const double aij = a[static_cast<size_t>(i) * seq + j];
            const double* go = self.grad.data() + base + static_cast<size_t>(i) * d;
            for (int c = 0; c < dh; ++c) gv[c] += aij * go[c];
          }
        }
        // softmax backward then score backward
        for (int i = 0; i < seq; ++i) {
          const double* arow = a + static_cast<size_t>(i) * seq;
          double* darow = da.data() + static_cast<size_t>(i) * seq;
          double dot = 0.0;
          for (int j = 0; j < seq; ++j) dot += darow[j] * arow[j];
          for (int j = 0; j < seq; ++j) darow[j] = arow[j] * (darow[j] - dot) * scale;
        }
        // dQ[i] += sum_j dS[i][j] K[j]; dK[j] += sum_i dS[i][j] Q[i]
        for (int i = 0; i < seq; ++i) {
          double* gq = qi->grad.data() + base + static_cast<size_t>(i) * d;
          const double* dsrow = da.data() + static_cast<size_t>(i) * seq;
          for (int j = 0; j < seq; ++j) {
            const double ds = dsrow[j];
            const double* kj = ki->value.data() + base + static_cast<size_t>(j) * d;
            for (int c = 0; c < dh; ++c) gq[c] += ds * kj[c];
          }
        }
        for (int j = 0; j < seq; ++j) {
          double* gk = ki->grad.data() + base + static_cast<size_t>(j) * d;
          for (int i = 0; i < seq; ++i) {
            const double ds = da[static_cast<size_t>(i) * seq + j];
            const double* qrow = qi->value.data() + base + static_cast<size_t>(i) * d;
            for (int c = 0; c < dh; ++c) gk[c] += ds * qrow[c];
          }
        }
      }
    }
  });

  auto& out = y.impl()->value;
#pragma omp parallel for schedule(static) collapse(2) if (batch * heads > 1)
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const size_t base = static_cast<size_t>(b) * seq * d + static_cast<size_t>(h) * dh;
      double* a = attn->data() + (static_cast<size_t>(b) * heads + h) * seq * seq;
      for (int i = 0; i < seq; ++i) {
        const double* qrow = qi->value.data() + base + static_cast<size_t>(i) * d;
        double* arow = a + static_cast<size_t>(i) * seq;
        double mx = -1e300;
        for (int j = 0; j < seq; ++j) {
          const double* krow = ki->value.data() + base + static_cast<size_t>(j) * d;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += qrow[c] * krow[c];
          arow[j] = s * scale;
          mx = std::max(mx, arow[j]);
        }
        double z = 0.0;
        for (int j = 0; j < seq; ++j) {
          arow[j] = std::exp(arow[j] - mx);
          z += arow[j];
        }
        for (int j = 0; j < seq; ++j) arow[j] /= z;
        double* orow = out.data() + base + static_cast<size_t>(i) * d;
        for (int j = 0; j < seq; ++j) {
          const double aij = arow[j];
          const double* vrow = vi->value.data() + base + static_cast<size_t>(j) * d;
          for (int c = 0; c < dh; ++c) orow[c] += aij * vrow[c];
        }
      }
    }
  }

  if (capture) {
    PF_CHECK(capture->batch == batch && capture->seq == seq && capture->heads == heads &&
                 layer < capture->layers,
             "attention capture: dimensions do not match the capture sink");
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const double* a = attn->data() + (static_cast<size_t>(b) * heads + h) * seq * seq;
        capture->cls_rows[b][layer][h].assign(a, a + seq);  // CLS is row 0
      }
      if (capture->want_full) {
        auto& m = capture->full[b][layer];
        m.assign(static_cast<size_t>(seq) * seq, 0.0);
        for (int h = 0; h < heads; ++h) {
          const double* a = attn->data() + (static_cast<size_t>(b) * heads + h) * seq * seq;
          for (size_t i = 0; i < m.size(); ++i) m[i] += a[i] / heads;
        }
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// fused losses

Tensor koleo_loss(const Tensor& x, double eps) {
  PF_CHECK(x.rank() == 2, "koleo_loss: rank-2 input required");
  const int B = x.shape()[0], d = x.shape()[1];
  PF_CHECK(B >= 2, "koleo_loss: batch must be >= 2, got ", B);
  auto xi = x.impl();

  // forward bookkeeping reused by backward
  auto xn = std::make_shared<std::vector<double>>(xi->value);
  auto nn = std::make_shared<std::vector<int>>(B, -1);
  auto nd = std::make_shared<std::vector<double>>(B, 0.0);

  for (int i = 0; i < B; ++i) {
    double* row = xn->data() + static_cast<size_t>(i) * d;
    double r = 0.0;
    for (int j = 0; j < d; ++j) r += row[j] * row[j];
    r = std::max(std::sqrt(r), 1e-12);
    for (int j = 0; j < d; ++j) row[j] /= r;
  }
  double loss = 0.0;
  for (int i = 0; i < B; ++i) {
    double best = 1e300;
    int bj = -1;
    for (int j = 0; j < B; ++j) {
      if (j == i) continue;
      double s = 0.0;
      const double* a = xn->data() + static_cast<size_t>(i) * d;
      const double* b = xn->data() + static_cast<size_t>(j) * d;
      for (int c = 0; c < d; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
      if (s < best) {
        best = s;
        bj = j;
      }
    }
    (*nn)[i] = bj;
    (*nd)[i] = std::sqrt(best);
    loss += std::log((*nd)[i] + eps);
  }
  loss = -loss / B;

  Tensor y = make_op({1}, {&x}, [xi, xn, nn, nd, B, d, eps](TensorImpl& self) {
    xi->ensure_grad();
    const double g = self.grad[0];
    std::vector<double> gxn(static_cast<size_t>(B) * d, 0.0);
    for (int i = 0; i < B; ++i) {
      const int j = (*nn)[i];
      const double dist = (*nd)[i];
      const double coef = -g / (B * (dist + eps) * std::max(dist, 1e-12));
      const double* a = xn->data() + static_cast<size_t>(i) * d;
      const double* b = xn->data() + static_cast<size_t>(j) * d;
      for (int c = 0; c < d; ++c) {
        const double diff = a[c] - b[c];
        gxn[static_cast<size_t>(i) * d + c] += coef * diff;
        gxn[static_cast<size_t>(j) * d + c] -= coef * diff;
      }
    }
    // back through row normalization
    for (int i = 0; i < B; ++i) {
      const double* xrow = xi->value.data() + static_cast<size_t>(i) * d;
      const double* yrow = xn->data() + static_cast<size_t>(i) * d;
      const double* gy = gxn.data() + static_cast<size_t>(i) * d;
      double r = 0.0;
      for (int c = 0; c < d; ++c) r += xrow[c] * xrow[c];
      r = std::max(std::sqrt(r), 1e-12);
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += gy[c] * yrow[c];
      double* gx = xi->grad.data() + static_cast<size_t>(i) * d;
      for (int c = 0; c < d; ++c) gx[c] += (gy[c] - yrow[c] * dot) / r;
    }
  });
  y.impl()->value[0] = loss;
  return y;
}

// ---------------------------------------------------------------------------
// finite differences

double finite_difference_max_err(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                 double h) {
  for (Tensor& p : params) p.zero_grad();
  Tensor loss = f();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params)
    analytic.emplace_back(p.grad().begin(), p.grad().end());

  double max_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    auto buf = p.data_mut();
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double orig = buf[i];
      buf[i] = orig + h;
      const double up = f().item();
      buf[i] = orig - h;
      const double dn = f().item();
      buf[i] = orig;
      const double num = (up - dn) / (2.0 * h);
      const double ana = analytic[pi][static_cast<size_t>(i)];
      const double denom = std::max({1.0, std::abs(num), std::abs(ana)});
      max_err = std::max(max_err, std::abs(num - ana) / denom);
    }
  }
  return max_err;
}

}  // namespace panfm
