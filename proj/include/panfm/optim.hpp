#pragma once

#include <string>
#include <vector>

#include "panfm/tensor.hpp"

namespace panfm {

// Ordered registry of named parameters. Order defines the checkpoint
// manifest, so it must be construction-stable.
struct ParameterStore {
  struct Entry {
    std::string name;
    Tensor tensor;
  };
  std::vector<Entry> entries;

  Tensor& add(const std::string& name, Tensor t);
  const Tensor* find(const std::string& name) const;
  size_t size() const { return entries.size(); }

  void zero_grad();
  // true iff names and shapes match entry-by-entry
  bool same_manifest(const ParameterStore& other) const;
  // copies values (not grads) from other; manifests must match
  void copy_values_from(const ParameterStore& other);
};

// teacher <- m * teacher + (1 - m) * student, elementwise over all entries.
void ema_update(ParameterStore& teacher, const ParameterStore& student, double m);

// Decoupled-weight-decay Adam. Weight decay multiplies the parameter
// directly (p -= lr*wd*p), never the gradient. Moments are bias-corrected.
class AdamW {
 public:
  struct Config {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  AdamW();
  explicit AdamW(Config cfg) : cfg_(cfg) {}

  // One update over every parameter in the store that has a grad buffer.
  // Throws (naming the parameter) on a NaN gradient.
  void step(ParameterStore& params, double lr, double wd);

  int64_t step_count() const { return t_; }

 private:
  Config cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;  // lazily sized to the store
};

// Training schedule over [0, total_steps]. Endpoints are exact: eval(0)
// and eval(total) return the declared boundary values.
struct Schedule {
  enum class Kind { Constant, Cosine, WarmupCosine };
  Kind kind = Kind::Constant;
  double warmup_start = 0.0;  // value at step 0 of the warmup segment
  double start = 0.0;         // value at end of warmup / start of cosine
  double end = 0.0;           // value at total_steps
  int64_t warmup_steps = 0;
  int64_t total_steps = 0;

  static Schedule constant(double v, int64_t total);
  static Schedule cosine(double start, double end, int64_t total);
  static Schedule warmup_cosine(double warmup_start, double start, double end,
                                int64_t warmup_steps, int64_t total);

  double eval(int64_t step) const;
};

}  // namespace panfm
