#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "panfm/rng.hpp"
#include "panfm/schema.hpp"

namespace panfm {

// One participant. Organs are either fully present (exactly feature_dim
// finite values) or absent; a partially-present organ is stored as absent.
// Every record keeps at least one organ.
struct ParticipantRecord {
  int64_t id = 0;
  // indexed by schema organ order; nullopt = organ unavailable
  std::vector<std::optional<std::vector<double>>> organs;
  std::map<std::string, int> labels;  // task name -> {0, 1}

  std::vector<uint8_t> availability() const;
  int available_count() const;
  bool complete() const;  // all organs present
};

struct NormStats {
  // per organ, per feature; std floored at 1e-8
  std::vector<std::vector<double>> mean, std;
};

struct TaskDef {
  std::string name;
  std::vector<double> weights;  // over latent factors
  double intercept = 0.0;
};

// Synthetic cohort generator. Per participant: latent u ~ N(0, I_F);
// organ features x_o = A_o u + noise. The dominant organ's loading on
// latent factor 0 is scaled by dominance_multiplier, planting a
// dominant-organ shortcut. Availability is Bernoulli per organ, resampled
// until at least one organ is present. Labels are Bernoulli(sigmoid(w.u+b)).
struct CohortGenConfig {
  int participants = 0;
  int latent_dim = 4;
  double signal_scale = 1.0;
  double noise_scale = 0.5;
  std::string dominant_organ;
  double dominance_multiplier = 3.0;
  std::map<std::string, double> availability;        // organ -> c_o in (0, 1]
  std::map<std::string, double> organ_signal_scale;  // optional per-organ override
  // optional per-factor loading multipliers (length F); a head-heavy profile
  // makes factor 0 the dominant shared axis across organs
  std::vector<double> factor_scale;
  std::vector<TaskDef> tasks;
  uint64_t seed = 0;

  void validate(const OrganSchema& schema) const;
};

CohortGenConfig load_gen_config(const std::string& path);
void save_gen_config(const CohortGenConfig& cfg, const std::string& path);

// Pure function of (cfg, schema); identical seeds give identical cohorts.
// Each participant draws from an id-keyed substream, so generation order
// is irrelevant.
std::vector<ParticipantRecord> generate_cohort(const CohortGenConfig& cfg,
                                               const OrganSchema& schema);

// The organ loading matrices the generator used (organ x [D_o x F]),
// deterministic in cfg. Exposed for oracle computations in tests.
std::vector<std::vector<double>> generator_loadings(const CohortGenConfig& cfg,
                                                    const OrganSchema& schema);

// Mean/std per organ feature over records where the organ is present.
// Population variance; std floored at 1e-8. Throws if an organ is never
// observed.
NormStats compute_norm_stats(const std::vector<ParticipantRecord>& records,
                             const OrganSchema& schema);

void save_norm_stats(const NormStats& stats, const OrganSchema& schema, const std::string& path);
NormStats load_norm_stats(const OrganSchema& schema, const std::string& path);

ParticipantRecord normalize(const ParticipantRecord& rec, const NormStats& stats);
std::vector<ParticipantRecord> normalize_all(const std::vector<ParticipantRecord>& recs,
                                             const NormStats& stats);

// Deterministic stratified split on the primary (first) task label.
// fractions: pretrain, train, val, test; must sum to 1.
struct CohortSplits {
  std::vector<ParticipantRecord> pretrain, train, val, test;
};
CohortSplits split_cohort(const std::vector<ParticipantRecord>& records,
                          const std::array<double, 4>& fractions, uint64_t seed);

// JSONL: one object per line {"id", "organs": {name: [..] | null}, "labels"}.
// Ingest enforces intra-organ completeness: wrong width or non-finite
// values mark the whole organ unavailable (with a warning).
void write_jsonl(const std::vector<ParticipantRecord>& records, const OrganSchema& schema,
                 const std::string& path);
std::vector<ParticipantRecord> read_jsonl(const OrganSchema& schema, const std::string& path);

}  // namespace panfm
