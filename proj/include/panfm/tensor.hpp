#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace panfm {

// Dense f64 tensor with reverse-mode autodiff. The graph is define-by-run:
// each op records its inputs and a backward closure on the output node, and
// the whole graph is freed once the loss tensor goes out of scope after
// backward(). Gradients accumulate by summation; call zero_grad() on leaves
// between steps.
//
// Tensor itself is a cheap value-semantic handle (shared_ptr to the node).

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

// While a NoGradGuard is alive on a thread, ops produce constant outputs
// (no inputs recorded, no backward closures). Used for teacher forwards
// and embedding.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int64_t numel() const { return impl_->numel(); }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  // rank-2 helpers; rank-1 tensors count as a single row
  int rows() const;
  int cols() const;

  double item() const;
  std::span<const double> data() const { return impl_->value; }
  std::span<double> data_mut() { return impl_->value; }
  std::span<const double> grad() const;
  bool has_grad() const { return !impl_->grad.empty(); }
  bool requires_grad() const { return impl_->requires_grad; }

  void zero_grad();

  // Reverse-mode sweep from a scalar loss. Visits each reachable node once
  // in reverse topological order; gradients sum across multiple uses.
  void backward() const;

  // Value copy with no graph edge.
  Tensor detach() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---- elementwise / scalar ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // input clamped at 1e-12
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

// ---- broadcast ----
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // a[m x n] + v[n] per row
Tensor mul_rowvec(const Tensor& a, const Tensor& v);
Tensor div_rowvec(const Tensor& a, const Tensor& v);
Tensor scale_rows(const Tensor& a, const Tensor& s);  // row i of a times s[i]
Tensor broadcast_row(const Tensor& v, int m);         // tile v[n] into [m x n]

// ---- structure ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
// rows offset, offset+stride, ... (count rows total)
Tensor take_rows_strided(const Tensor& a, int offset, int stride, int count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor row_sum(const Tensor& a);   // [m x n] -> [m]
Tensor row_mean(const Tensor& a);  // [m x n] -> [m]
Tensor col_sum(const Tensor& a);   // [m x n] -> [n]
Tensor col_mean(const Tensor& a);  // [m x n] -> [n]

// ---- row-wise normalizations ----
// Stable softmax over the last axis (max-subtraction). For rank-1 input the
// whole vector is one row.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor logsumexp_rows(const Tensor& a);  // [m x n] -> [m]
// softmax over an arbitrary axis of a rank-2 tensor (0 or 1); rank-1 only
// axis 0.
Tensor softmax(const Tensor& a, int axis);
// Per-row zero mean / unit variance, then affine with gain and bias (both
// of width n). eps sits under the square root.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);

// ---- fused network ops ----
// y = x W + b. Equivalent to matmul + add_rowvec with one graph node.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Attention capture sink: the CLS-query row of every layer/head's
// post-softmax attention, recorded before value mixing, per batch entry.
// Optionally the full head-averaged matrices (needed by the rollout
// saliency proxy only; opt-in because of its footprint).
struct AttentionCaptureBatch {
  int batch = 0, layers = 0, heads = 0, seq = 0;
  bool want_full = false;
  // cls_rows[b][l][h] is a seq-length distribution (position 0 = CLS).
  std::vector<std::vector<std::vector<std::vector<double>>>> cls_rows;
  // full[b][l] is the head-averaged seq x seq attention matrix.
  std::vector<std::vector<std::vector<double>>> full;

  void init(int B, int L, int H, int S, bool full_matrices);
};

// Batched multi-head self-attention over B sequences of length S packed as
// [B*S x d]. Heads split d into H contiguous slices. Each sequence attends
// only within itself. Scale is applied to q k^T scores. If capture is
// non-null its (b, layer) slots are filled during the forward pass.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch, int seq,
                           int heads, double scale, AttentionCaptureBatch* capture = nullptr,
                           int layer = 0);

// ---- fused losses ----
// KoLeo regularizer: rows are L2-normalized, then
// -(1/B) sum_i log(min_{j != i} ||x_i - x_j|| + eps).
Tensor koleo_loss(const Tensor& x, double eps = 1e-8);

// ---- finite-difference gradient checking (test support) ----
// Central differences with step h on every parameter entry; returns the
// max relative error against analytic gradients, where relative error is
// |a - n| / max(1, |a|, |n|).
double finite_difference_max_err(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                 double h = 1e-5);

}  // namespace panfm
