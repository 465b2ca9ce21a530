#include "panfm/optim.hpp"

#include <cmath>

#include "panfm/util.hpp"

namespace panfm {

Tensor& ParameterStore::add(const std::string& name, Tensor t) {
  for (const Entry& e : entries)
    PF_CHECK(e.name != name, "ParameterStore: duplicate parameter name '", name, "'");
  entries.push_back({name, std::move(t)});
  return entries.back().tensor;
}

const Tensor* ParameterStore::find(const std::string& name) const {
  for (const Entry& e : entries)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

void ParameterStore::zero_grad() {
  for (Entry& e : entries) e.tensor.zero_grad();
}

bool ParameterStore::same_manifest(const ParameterStore& other) const {
  if (entries.size() != other.entries.size()) return false;
  for (size_t i = 0; i < entries.size(); ++i)
    if (entries[i].name != other.entries[i].name ||
        entries[i].tensor.shape() != other.entries[i].tensor.shape())
      return false;
  return true;
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  PF_CHECK(same_manifest(other), "ParameterStore: manifest mismatch in copy_values_from");
  for (size_t i = 0; i < entries.size(); ++i) {
    auto dst = entries[i].tensor.data_mut();
    auto src = other.entries[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void ema_update(ParameterStore& teacher, const ParameterStore& student, double m) {
  PF_CHECK(teacher.same_manifest(student),
           "ema_update: teacher/student parameter manifests differ");
  for (size_t i = 0; i < teacher.entries.size(); ++i) {
    auto t = teacher.entries[i].tensor.data_mut();
    auto s = student.entries[i].tensor.data();
    for (size_t j = 0; j < t.size(); ++j) t[j] = m * t[j] + (1.0 - m) * s[j];
  }
}

AdamW::AdamW() : cfg_(Config{}) {}

void AdamW::step(ParameterStore& params, double lr, double wd) {
  PF_CHECK(lr >= 0.0 && wd >= 0.0, "adamw: lr and wd must be >= 0");
  if (m_.size() != params.size()) {
    PF_CHECK(m_.empty(), "adamw: parameter store size changed between steps");
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params.entries[i].tensor.numel(), 0.0);
      v_[i].assign(params.entries[i].tensor.numel(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& entry = params.entries[i];
    if (!entry.tensor.has_grad()) continue;
    auto g = entry.tensor.grad();
    auto p = entry.tensor.data_mut();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < p.size(); ++j) {
      PF_CHECK(!std::isnan(g[j]), "adamw: NaN gradient in parameter '", entry.name, "'");
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p[j]);
    }
  }
}

Schedule Schedule::constant(double v, int64_t total) {
  return {Kind::Constant, v, v, v, 0, total};
}

Schedule Schedule::cosine(double start, double end, int64_t total) {
  return {Kind::Cosine, start, start, end, 0, total};
}

Schedule Schedule::warmup_cosine(double warmup_start, double start, double end,
                                 int64_t warmup_steps, int64_t total) {
  PF_CHECK(warmup_steps >= 0 && warmup_steps <= total, "schedule: need 0 <= warmup (", warmup_steps,
           ") <= total (", total, ")");
  return {Kind::WarmupCosine, warmup_start, start, end, warmup_steps, total};
}

double Schedule::eval(int64_t step) const {
  PF_CHECK(step >= 0 && step <= total_steps, "schedule: step ", step, " outside [0, ",
           total_steps, "]");
  if (kind == Kind::Constant) return start;
  int64_t cos_begin = kind == Kind::WarmupCosine ? warmup_steps : 0;
  if (kind == Kind::WarmupCosine && step < warmup_steps) {
    const double f = static_cast<double>(step) / static_cast<double>(warmup_steps);
    return warmup_start + (start - warmup_start) * f;
  }
  const int64_t span = total_steps - cos_begin;
  if (span == 0) return end;
  const double f = static_cast<double>(step - cos_begin) / static_cast<double>(span);
  return end + 0.5 * (start - end) * (1.0 + std::cos(M_PI * f));
}

}  // namespace panfm
