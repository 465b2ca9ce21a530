#pragma once

#include <memory>
#include <string>
#include <vector>

#include "panfm/cohort.hpp"
#include "panfm/model.hpp"
#include "panfm/optim.hpp"
#include "panfm/rng.hpp"
#include "panfm/schema.hpp"
#include "panfm/sgm.hpp"

namespace panfm {

enum class Objective { Dino, NTXent, VICReg, Barlow };
enum class MaskStrategy { SGM, Random };

Objective parse_objective(const std::string& s);
std::string objective_name(Objective o);
MaskStrategy parse_strategy(const std::string& s);
std::string strategy_name(MaskStrategy s);

// pretrain.json
struct PretrainConfig {
  Objective objective = Objective::Dino;
  MaskStrategy strategy = MaskStrategy::SGM;
  SaliencyProxy proxy = SaliencyProxy::AllLayerAverage;
  int epochs = 30;
  int batch_size = 64;

  double lr = 1e-3;
  double lr_end = 1e-6;
  int warmup_epochs = 10;
  double wd_start = 0.04, wd_end = 0.4;
  double ema_start = 0.992, ema_end = 1.0;

  // self-distillation
  double teacher_temp_start = 0.04, teacher_temp_end = 0.07;
  int teacher_temp_warmup_epochs = 10;
  double student_temp = 0.1;
  double center_momentum = 0.9;
  double koleo_weight = 0.1;

  // masking
  double r_mask = 0.5;
  double tau_sgm = 0.25;

  // plug-in objectives
  double ntxent_temp = 0.5;
  double vicreg_mu = 25.0, vicreg_nu = 25.0, vicreg_xi = 1.0, vicreg_gamma = 1.0;
  double barlow_lambda_off = 5e-3;
  int plugin_dim = 128;

  uint64_t seed = 1234;
  int checkpoint_every_epochs = 0;  // 0: initial + final only
  int saliency_log_every = 50;      // steps; 0 disables

  void validate() const;
};

PretrainConfig load_pretrain_config(const std::string& path);
void save_pretrain_config(const PretrainConfig& cfg, const std::string& path);

// Plug-in projection MLP (gelu between linear layers).
struct Projector {
  std::vector<Tensor> w, b;
  Tensor forward(const Tensor& x) const;
};

// Teacher-student pre-training per the masking-based self-distillation
// recipe: every iteration runs the gradient-free teacher on the full view
// (capturing attention), builds per-participant mask sets (SGM or uniform),
// runs the student on the masked view, steps AdamW on the scheduled
// lr/weight-decay, EMA-updates the teacher, and (distillation only)
// updates the prototype center.
class Trainer {
 public:
  Trainer(const OrganSchema& schema, const ModelConfig& mcfg, const PretrainConfig& cfg,
          std::vector<ParticipantRecord> cohort);

  // Full run. out_dir may be empty (no checkpoints/logs written). Returns
  // mean total loss per epoch.
  const std::vector<double>& run(const std::string& out_dir);

  // One training iteration on an explicit batch; returns the total loss.
  // Exposed for the overhead benchmark.
  double step(const std::vector<const ParticipantRecord*>& batch);

  PanModel& student() { return *student_; }
  PanModel& teacher() { return *teacher_; }
  const std::vector<double>& epoch_losses() const { return epoch_losses_; }
  const std::vector<double>& center() const { return center_; }
  int64_t step_count() const { return step_; }

  // Teacher-saliency shares over a fixed full-view sample (mean S_o per
  // organ plus CLS self mass; shares sum to 1 for the A2 proxy).
  std::vector<double> teacher_saliency_shares(
      const std::vector<const ParticipantRecord*>& sample, double* cls_self = nullptr) const;

 private:
  void maybe_log_saliency(const std::vector<const ParticipantRecord*>& batch,
                          const std::vector<SaliencyReport>& reports);
  void write_checkpoint(const std::string& out_dir, int64_t step);

  OrganSchema schema_;
  ModelConfig mcfg_;
  PretrainConfig cfg_;
  std::vector<ParticipantRecord> cohort_;

  std::unique_ptr<PanModel> student_, teacher_;
  Projector student_proj_, teacher_proj_;
  ParameterStore student_params_, teacher_params_;  // model (+ projector) entries
  AdamW opt_;
  std::vector<double> center_;
  RngStream data_rng_, mask_rng_;
  Schedule lr_sched_, wd_sched_, ema_sched_, temp_sched_;
  int64_t step_ = 0;
  int64_t total_steps_ = 0;
  int epoch_ = 0;
  std::vector<double> epoch_losses_;
  std::vector<std::string> loss_rows_;
  std::vector<std::string> saliency_rows_;
  double last_lg_ = 0.0, last_lk_ = 0.0;
};

// Wall-clock comparison of two masking strategies on identical weights and
// batch order. Reports per-iteration mean and standard deviation after
// warmup, plus the relative overhead of side A over side B.
struct OverheadReport {
  double mean_a_ms = 0.0, std_a_ms = 0.0;
  double mean_b_ms = 0.0, std_b_ms = 0.0;
  double delta_percent = 0.0;
};
OverheadReport bench_overhead(const OrganSchema& schema, const ModelConfig& mcfg,
                              const PretrainConfig& base_cfg,
                              const std::vector<ParticipantRecord>& cohort,
                              const ParameterStore& weights, MaskStrategy a, MaskStrategy b,
                              int iters, int warmup);

}  // namespace panfm
