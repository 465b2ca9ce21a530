#include "panfm/cohort.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "panfm/util.hpp"

namespace panfm {

using nlohmann::json;

std::vector<uint8_t> ParticipantRecord::availability() const {
  std::vector<uint8_t> a(organs.size());
  for (size_t i = 0; i < organs.size(); ++i) a[i] = organs[i].has_value() ? 1 : 0;
  return a;
}

int ParticipantRecord::available_count() const {
  int n = 0;
  for (const auto& o : organs) n += o.has_value() ? 1 : 0;
  return n;
}

bool ParticipantRecord::complete() const {
  return available_count() == static_cast<int>(organs.size());
}

void CohortGenConfig::validate(const OrganSchema& schema) const {
  PF_CHECK(participants > 0, "gen config: participants must be positive");
  PF_CHECK(latent_dim >= 1, "gen config: latent_dim must be >= 1");
  PF_CHECK(noise_scale >= 0.0, "gen config: noise_scale must be >= 0");
  PF_CHECK(schema.index_of(dominant_organ) >= 0, "gen config: dominant_organ '", dominant_organ,
           "' is not a schema organ");
  for (const OrganSpec& o : schema.organs()) {
    auto it = availability.find(o.name);
    PF_CHECK(it != availability.end(), "gen config: availability missing organ '", o.name, "'");
    PF_CHECK(it->second > 0.0 && it->second <= 1.0, "gen config: availability['", o.name,
             "'] must be in (0, 1], got ", it->second);
  }
  for (const auto& [name, scale] : organ_signal_scale)
    PF_CHECK(schema.index_of(name) >= 0, "gen config: organ_signal_scale names unknown organ '",
             name, "'");
  if (!factor_scale.empty()) {
    PF_CHECK(static_cast<int>(factor_scale.size()) == latent_dim,
             "gen config: factor_scale length ", factor_scale.size(), " != latent_dim ",
             latent_dim);
    for (double v : factor_scale)
      PF_CHECK(v >= 0.0, "gen config: factor_scale entries must be >= 0");
  }
  PF_CHECK(!tasks.empty(), "gen config: at least one task required");
  for (const TaskDef& t : tasks) {
    PF_CHECK(!t.name.empty(), "gen config: task with empty name");
    PF_CHECK(static_cast<int>(t.weights.size()) == latent_dim, "gen config: task '", t.name,
             "' weight length ", t.weights.size(), " != latent_dim ", latent_dim);
  }
}

CohortGenConfig load_gen_config(const std::string& path) {
  std::ifstream f(path);
  PF_CHECK(f.good(), "gen config: cannot open ", path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail(msg("gen config: parse error in ", path, ": ", e.what()));
  }
  CohortGenConfig cfg;
  cfg.participants = j.at("participants").get<int>();
  cfg.latent_dim = j.at("latent_dim").get<int>();
  cfg.signal_scale = j.at("signal_scale").get<double>();
  cfg.noise_scale = j.at("noise_scale").get<double>();
  cfg.dominant_organ = j.at("dominant_organ").get<std::string>();
  cfg.dominance_multiplier = j.at("dominance_multiplier").get<double>();
  cfg.availability = j.at("availability").get<std::map<std::string, double>>();
  if (j.contains("organ_signal_scale"))
    cfg.organ_signal_scale = j.at("organ_signal_scale").get<std::map<std::string, double>>();
  if (j.contains("factor_scale"))
    cfg.factor_scale = j.at("factor_scale").get<std::vector<double>>();
  for (const auto& t : j.at("tasks"))
    cfg.tasks.push_back({t.at("name").get<std::string>(),
                         t.at("weights").get<std::vector<double>>(),
                         t.at("intercept").get<double>()});
  cfg.seed = j.at("seed").get<uint64_t>();
  return cfg;
}

void save_gen_config(const CohortGenConfig& cfg, const std::string& path) {
  json tasks = json::array();
  for (const TaskDef& t : cfg.tasks)
    tasks.push_back({{"name", t.name}, {"weights", t.weights}, {"intercept", t.intercept}});
  json j{{"participants", cfg.participants},
         {"latent_dim", cfg.latent_dim},
         {"signal_scale", cfg.signal_scale},
         {"noise_scale", cfg.noise_scale},
         {"dominant_organ", cfg.dominant_organ},
         {"dominance_multiplier", cfg.dominance_multiplier},
         {"availability", cfg.availability},
         {"organ_signal_scale", cfg.organ_signal_scale},
         {"factor_scale", cfg.factor_scale},
         {"tasks", tasks},
         {"seed", cfg.seed}};
  std::ofstream f(path);
  PF_CHECK(f.good(), "gen config: cannot write ", path);
  f << j.dump(2) << "\n";
}

std::vector<std::vector<double>> generator_loadings(const CohortGenConfig& cfg,
                                                    const OrganSchema& schema) {
  RngStream root(cfg.seed);
  std::vector<std::vector<double>> loadings(schema.organ_count());
  const int F = cfg.latent_dim;
  for (int o = 0; o < schema.organ_count(); ++o) {
    const OrganSpec& spec = schema.organs()[o];
    double scale = cfg.signal_scale;
    if (auto it = cfg.organ_signal_scale.find(spec.name); it != cfg.organ_signal_scale.end())
      scale *= it->second;
    // width normalization: total signal power per latent factor is
    // independent of D_o, so wide organs do not dominate by feature count
    // alone and the dominance multiplier is the controlled effect
    scale /= std::sqrt(static_cast<double>(spec.feature_dim));
    RngStream rng = root.substream("loadings", static_cast<uint64_t>(o));
    auto& a = loadings[o];
    a.resize(static_cast<size_t>(spec.feature_dim) * F);
    for (auto& v : a) v = rng.normal() * scale;
    if (!cfg.factor_scale.empty())
      for (int i = 0; i < spec.feature_dim; ++i)
        for (int f = 0; f < F; ++f) a[static_cast<size_t>(i) * F + f] *= cfg.factor_scale[f];
    if (spec.name == cfg.dominant_organ)
      for (int i = 0; i < spec.feature_dim; ++i)
        a[static_cast<size_t>(i) * F] *= cfg.dominance_multiplier;
  }
  return loadings;
}

std::vector<ParticipantRecord> generate_cohort(const CohortGenConfig& cfg,
                                               const OrganSchema& schema) {
  cfg.validate(schema);
  const auto loadings = generator_loadings(cfg, schema);
  const int F = cfg.latent_dim;
  const int O = schema.organ_count();
  std::vector<double> rates(O);
  for (int o = 0; o < O; ++o) rates[o] = cfg.availability.at(schema.organs()[o].name);

  RngStream root(cfg.seed);
  std::vector<ParticipantRecord> records(cfg.participants);
#pragma omp parallel for schedule(static)
  for (int p = 0; p < cfg.participants; ++p) {
    RngStream rng = root.substream("participant", static_cast<uint64_t>(p));
    ParticipantRecord rec;
    rec.id = p;
    std::vector<double> u(F);
    for (auto& v : u) v = rng.normal();

    std::vector<uint8_t> avail(O, 0);
    int navail = 0;
    do {
      navail = 0;
      for (int o = 0; o < O; ++o) {
        avail[o] = rng.u01() < rates[o] ? 1 : 0;
        navail += avail[o];
      }
    } while (navail == 0);

    rec.organs.resize(O);
    for (int o = 0; o < O; ++o) {
      const int D = schema.organs()[o].feature_dim;
      if (!avail[o]) continue;
      std::vector<double> x(D);
      const auto& a = loadings[o];
      for (int i = 0; i < D; ++i) {
        double acc = 0.0;
        for (int f = 0; f < F; ++f) acc += a[static_cast<size_t>(i) * F + f] * u[f];
        x[i] = acc + rng.normal() * cfg.noise_scale;
      }
      rec.organs[o] = std::move(x);
    }
    for (const TaskDef& t : cfg.tasks) {
      double z = t.intercept;
      for (int f = 0; f < F; ++f) z += t.weights[f] * u[f];
      const double prob = 1.0 / (1.0 + std::exp(-z));
      rec.labels[t.name] = rng.u01() < prob ? 1 : 0;
    }
    records[p] = std::move(rec);
  }
  return records;
}

NormStats compute_norm_stats(const std::vector<ParticipantRecord>& records,
                             const OrganSchema& schema) {
  const int O = schema.organ_count();
  NormStats stats;
  stats.mean.resize(O);
  stats.std.resize(O);
  for (int o = 0; o < O; ++o) {
    const int D = schema.organs()[o].feature_dim;
    std::vector<double> sum(D, 0.0), sumsq(D, 0.0);
    int64_t count = 0;
    for (const auto& r : records) {
      if (!r.organs[o]) continue;
      ++count;
      const auto& x = *r.organs[o];
      for (int i = 0; i < D; ++i) sum[i] += x[i];
    }
    PF_CHECK(count > 0, "norm stats: organ '", schema.organs()[o].name,
             "' never observed in the cohort");
    std::vector<double> mean(D);
    for (int i = 0; i < D; ++i) mean[i] = sum[i] / static_cast<double>(count);
    for (const auto& r : records) {
      if (!r.organs[o]) continue;
      const auto& x = *r.organs[o];
      for (int i = 0; i < D; ++i) sumsq[i] += (x[i] - mean[i]) * (x[i] - mean[i]);
    }
    std::vector<double> sd(D);
    for (int i = 0; i < D; ++i)
      sd[i] = std::max(std::sqrt(sumsq[i] / static_cast<double>(count)), 1e-8);
    stats.mean[o] = std::move(mean);
    stats.std[o] = std::move(sd);
  }
  return stats;
}

void save_norm_stats(const NormStats& stats, const OrganSchema& schema, const std::string& path) {
  json j = json::object();
  for (int o = 0; o < schema.organ_count(); ++o)
    j[schema.organs()[o].name] = {{"mean", stats.mean[o]}, {"std", stats.std[o]}};
  std::ofstream f(path);
  PF_CHECK(f.good(), "norm stats: cannot write ", path);
  f << j.dump(2) << "\n";
}

NormStats load_norm_stats(const OrganSchema& schema, const std::string& path) {
  std::ifstream f(path);
  PF_CHECK(f.good(), "norm stats: cannot open ", path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail(msg("norm stats: parse error in ", path, ": ", e.what()));
  }
  NormStats stats;
  stats.mean.resize(schema.organ_count());
  stats.std.resize(schema.organ_count());
  for (int o = 0; o < schema.organ_count(); ++o) {
    const std::string& name = schema.organs()[o].name;
    PF_CHECK(j.contains(name), "norm stats: missing organ '", name, "' in ", path);
    stats.mean[o] = j[name].at("mean").get<std::vector<double>>();
    stats.std[o] = j[name].at("std").get<std::vector<double>>();
    PF_CHECK(static_cast<int>(stats.mean[o].size()) == schema.organs()[o].feature_dim &&
                 stats.mean[o].size() == stats.std[o].size(),
             "norm stats: width mismatch for organ '", name, "'");
  }
  return stats;
}

ParticipantRecord normalize(const ParticipantRecord& rec, const NormStats& stats) {
  PF_CHECK(rec.organs.size() == stats.mean.size(),
           "normalize: stats do not cover the record's schema");
  ParticipantRecord out = rec;
  for (size_t o = 0; o < out.organs.size(); ++o) {
    if (!out.organs[o]) continue;
    auto& x = *out.organs[o];
    PF_CHECK(x.size() == stats.mean[o].size(), "normalize: organ width mismatch");
    for (size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - stats.mean[o][i]) / stats.std[o][i];
  }
  return out;
}

std::vector<ParticipantRecord> normalize_all(const std::vector<ParticipantRecord>& recs,
                                             const NormStats& stats) {
  std::vector<ParticipantRecord> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(normalize(r, stats));
  return out;
}

CohortSplits split_cohort(const std::vector<ParticipantRecord>& records,
                          const std::array<double, 4>& fractions, uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    PF_CHECK(f >= 0.0, "split: fractions must be nonnegative");
    sum += f;
  }
  PF_CHECK(std::abs(sum - 1.0) < 1e-9, "split: fractions must sum to 1, got ", sum);
  PF_CHECK(!records.empty(), "split: empty cohort");

  // stratify on the primary task (first label key)
  const std::string primary = records.front().labels.empty() ? "" : records.front().labels.begin()->first;
  std::map<int, std::vector<size_t>> groups;
  for (size_t i = 0; i < records.size(); ++i) {
    int label = -1;
    auto it = records[i].labels.find(primary);
    if (it != records[i].labels.end()) label = it->second;
    groups[label].push_back(i);
  }

  RngStream rng = RngStream(seed).substream("split");
  CohortSplits out;
  std::vector<std::vector<ParticipantRecord>*> dests{&out.pretrain, &out.train, &out.val,
                                                     &out.test};
  for (auto& [label, idx] : groups) {
    rng.shuffle(idx);
    const size_t n = idx.size();
    // largest-remainder allocation so the split is exhaustive
    std::array<size_t, 4> take{};
    std::array<double, 4> rem{};
    size_t assigned = 0;
    for (int s = 0; s < 4; ++s) {
      const double want = fractions[s] * static_cast<double>(n);
      take[s] = static_cast<size_t>(want);
      rem[s] = want - static_cast<double>(take[s]);
      assigned += take[s];
    }
    while (assigned < n) {
      int best = 0;
      for (int s = 1; s < 4; ++s)
        if (rem[s] > rem[best]) best = s;
      ++take[best];
      rem[best] = -1.0;
      ++assigned;
    }
    size_t pos = 0;
    for (int s = 0; s < 4; ++s)
      for (size_t k = 0; k < take[s]; ++k) dests[s]->push_back(records[idx[pos++]]);
  }
  return out;
}

void write_jsonl(const std::vector<ParticipantRecord>& records, const OrganSchema& schema,
                 const std::string& path) {
  std::ofstream f(path);
  PF_CHECK(f.good(), "jsonl: cannot write ", path);
  for (const auto& r : records) {
    json organs = json::object();
    for (int o = 0; o < schema.organ_count(); ++o) {
      if (r.organs[o])
        organs[schema.organs()[o].name] = *r.organs[o];
      else
        organs[schema.organs()[o].name] = nullptr;
    }
    json line{{"id", r.id}, {"organs", organs}, {"labels", r.labels}};
    f << line.dump() << "\n";
  }
  PF_CHECK(f.good(), "jsonl: short write to ", path);
}

std::vector<ParticipantRecord> read_jsonl(const OrganSchema& schema, const std::string& path) {
  std::ifstream f(path);
  PF_CHECK(f.good(), "jsonl: cannot open ", path);
  std::vector<ParticipantRecord> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      fail(msg("jsonl: parse error at ", path, ":", lineno, ": ", e.what()));
    }
    ParticipantRecord rec;
    try {
      rec.id = j.at("id").get<int64_t>();
      rec.organs.assign(schema.organ_count(), std::nullopt);
      const auto& organs = j.at("organs");
      for (auto it = organs.begin(); it != organs.end(); ++it) {
        const int o = schema.index_of(it.key());
        PF_CHECK(o >= 0, "unknown organ '", it.key(), "'");
        if (it.value().is_null()) continue;
        auto x = it.value().get<std::vector<double>>();
        bool ok = static_cast<int>(x.size()) == schema.organs()[o].feature_dim;
        for (double v : x) ok = ok && std::isfinite(v);
        if (!ok) {
          log_warn(msg("jsonl: ", path, ":", lineno, ": organ '", it.key(),
                       "' incomplete, marking unavailable"));
          continue;
        }
        rec.organs[o] = std::move(x);
      }
      if (j.contains("labels"))
        rec.labels = j.at("labels").get<std::map<std::string, int>>();
    } catch (const json::exception& e) {
      fail(msg("jsonl: parse error at ", path, ":", lineno, ": ", e.what()));
    }
    PF_CHECK(rec.available_count() >= 1, "jsonl: ", path, ":", lineno,
             ": record has no available organ");
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace panfm
