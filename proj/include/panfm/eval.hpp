#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "panfm/cohort.hpp"
#include "panfm/model.hpp"
#include "panfm/sgm.hpp"

namespace panfm {

// Test-time organ removal. random_k draws per participant from a stream
// keyed by (seed, participant id) only, so the same dropout seed yields
// identical dropped sets under any checkpoint.
struct DropoutSpec {
  enum class Mode { None, RandomK, Specific };
  Mode mode = Mode::None;
  int k = 0;
  uint64_t seed = 0;
  std::vector<int> organs;  // schema indices, Specific mode

  static DropoutSpec none();
  static DropoutSpec random_k(int k, uint64_t seed);
  static DropoutSpec specific(std::vector<int> organs);
};

// The organs a spec removes for one record (sorted schema indices).
std::vector<int> dropped_organs(const DropoutSpec& spec, const ParticipantRecord& rec);

// Frozen-encoder embeddings: dropout applied by treating dropped organs as
// missing (mask branch), then a gradient-free forward; returns B x d
// row-major CLS outputs. Parallel over record chunks.
std::vector<double> embed_cohort(const PanModel& model,
                                 const std::vector<ParticipantRecord>& records,
                                 const DropoutSpec& spec);

struct ProbeConfig {
  double alpha = 0.75;
  double gamma = 2.0;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int epochs = 20;
  int batch_size = 256;
  uint64_t seed = 0;

  void validate() const;
};

struct LinearProbe {
  std::vector<double> w;
  double b = 0.0;

  std::vector<double> scores(const std::vector<double>& embeddings) const;
};

// Single affine map d -> 1 trained with focal loss and AdamW on frozen
// embeddings; deterministic in cfg.seed.
LinearProbe train_linear_probe(const std::vector<double>& embeddings, int dim,
                               const std::vector<int>& labels, const ProbeConfig& cfg);

struct MetricsRow {
  std::string task;
  std::string protocol;
  double auroc = 0.0;
  double balacc = 0.0;
  uint64_t probe_seed = 0;
  uint64_t dropout_seed = 0;
};

struct FinetuneConfig {
  ProbeConfig probe;        // head lr and focal parameters
  double lr_backbone = 0.0; // 0 freezes the backbone exactly
  int patience = 3;         // early-stopping epochs without val improvement
};

struct FinetuneResult {
  LinearProbe head;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

// Joint backbone + linear-head training with focal loss; early stopping on
// validation loss restores the best epoch. Mutates the model parameters.
FinetuneResult finetune(PanModel& model, const std::vector<ParticipantRecord>& train,
                        const std::vector<int>& train_labels,
                        const std::vector<ParticipantRecord>& val,
                        const std::vector<int>& val_labels, const FinetuneConfig& cfg);

// Robustness protocol grid. Standard runs on the whole test split with its
// natural missingness; Full and Drop-k run on the complete-organ subset;
// specific protocols remove one named organ.
struct EvalProtocols {
  bool standard = true;
  bool full = true;
  std::vector<int> drop_k;      // e.g. {1, 2, 3}
  bool specific = true;         // w/o-X for every organ
  int probe_seeds = 10;
  int dropout_seeds = 5;
};

std::vector<MetricsRow> organ_dropout_eval(const PanModel& model, const OrganSchema& schema,
                                           const std::vector<ParticipantRecord>& train,
                                           const std::vector<ParticipantRecord>& test,
                                           const std::vector<std::string>& tasks,
                                           const ProbeConfig& probe_cfg,
                                           const EvalProtocols& protocols);

// Lower-triangular pairwise-removal grid; cell (i, j) with i >= j is the
// mean AUROC over tasks and probe seeds with organs i and j removed
// (diagonal = single removal). Flat O x O matrix, upper triangle NaN.
std::vector<double> pairwise_dropout_heatmap(const PanModel& model, const OrganSchema& schema,
                                             const std::vector<ParticipantRecord>& train,
                                             const std::vector<ParticipantRecord>& test,
                                             const std::vector<std::string>& tasks,
                                             const ProbeConfig& probe_cfg, int probe_seeds);

struct ImportanceRow {
  std::string organ;
  std::string task;
  double delta_auroc_x100 = 0.0;
};

// 100 * (AUROC_full - AUROC_drop-o) per organ and task, averaged over probe
// seeds. Organs never available in the evaluated records are omitted.
std::vector<ImportanceRow> leave_one_out_importance(const PanModel& model,
                                                    const OrganSchema& schema,
                                                    const std::vector<ParticipantRecord>& train,
                                                    const std::vector<ParticipantRecord>& test,
                                                    const std::vector<std::string>& tasks,
                                                    const ProbeConfig& probe_cfg,
                                                    int probe_seeds);

struct TrajectoryRow {
  int64_t step = 0;
  std::string organ;  // organ name or "cls_self"
  double share = 0.0;
};

// Mean teacher saliency shares over a fixed full-view sample, per
// checkpoint of a series. Checkpoints must share the schema.
std::vector<TrajectoryRow> saliency_trajectory(
    const std::vector<std::pair<int64_t, std::string>>& checkpoints, const OrganSchema& schema,
    const ModelConfig& mcfg, const std::vector<ParticipantRecord>& sample, SaliencyProxy proxy);

// Convenience: model with checkpoint weights loaded.
PanModel load_model(const OrganSchema& schema, const ModelConfig& mcfg,
                    const std::string& ckpt_dir);

}  // namespace panfm
