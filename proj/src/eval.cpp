#include "panfm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "panfm/checkpoint.hpp"
#include "panfm/metrics.hpp"
#include "panfm/objectives.hpp"
#include "panfm/optim.hpp"
#include "panfm/util.hpp"

namespace panfm {

DropoutSpec DropoutSpec::none() { return {}; }

DropoutSpec DropoutSpec::random_k(int k, uint64_t seed) {
  DropoutSpec s;
  s.mode = Mode::RandomK;
  s.k = k;
  s.seed = seed;
  return s;
}

DropoutSpec DropoutSpec::specific(std::vector<int> organs) {
  DropoutSpec s;
  s.mode = Mode::Specific;
  s.organs = std::move(organs);
  return s;
}

std::vector<int> dropped_organs(const DropoutSpec& spec, const ParticipantRecord& rec) {
  if (spec.mode == DropoutSpec::Mode::None) return {};
  std::vector<int> avail;
  for (size_t o = 0; o < rec.organs.size(); ++o)
    if (rec.organs[o]) avail.push_back(static_cast<int>(o));

  if (spec.mode == DropoutSpec::Mode::Specific) {
    int removed = 0;
    for (int o : spec.organs)
      if (rec.organs[static_cast<size_t>(o)]) ++removed;
    PF_CHECK(static_cast<int>(avail.size()) - removed >= 1,
             "dropout: specific set would remove participant ", rec.id, "'s last organ");
    std::vector<int> out(spec.organs);
    std::sort(out.begin(), out.end());
    return out;
  }

  // RandomK: per-participant stream keyed by (seed, id) only
  PF_CHECK(spec.k >= 0, "dropout: k must be >= 0");
  if (spec.k == 0) return {};
  PF_CHECK(spec.k < static_cast<int>(avail.size()), "dropout: k = ", spec.k,
           " would remove participant ", rec.id, "'s last organ (", avail.size(), " available)");
  RngStream rng = RngStream(spec.seed).substream("dropout", static_cast<uint64_t>(rec.id));
  std::vector<int> pool = avail;
  std::vector<int> out;
  for (int i = 0; i < spec.k; ++i) {
    const size_t j = static_cast<size_t>(rng.uniform_int(pool.size()));
    out.push_back(pool[j]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> embed_cohort(const PanModel& model,
                                 const std::vector<ParticipantRecord>& records,
                                 const DropoutSpec& spec) {
  PF_CHECK(!records.empty(), "embed_cohort: no records");
  const int d = model.config().d;
  std::vector<double> out(records.size() * static_cast<size_t>(d));

  // dropped organs become missing before the forward pass
  std::vector<ParticipantRecord> view(records.begin(), records.end());
  for (auto& rec : view)
    for (int o : dropped_organs(spec, rec)) rec.organs[static_cast<size_t>(o)].reset();

  constexpr size_t kChunk = 64;
  const size_t chunks = (view.size() + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(dynamic)
  for (size_t c = 0; c < chunks; ++c) {
    NoGradGuard ng;
    const size_t begin = c * kChunk, end = std::min(begin + kChunk, view.size());
    std::vector<const ParticipantRecord*> batch;
    batch.reserve(end - begin);
    for (size_t i = begin; i < end; ++i) batch.push_back(&view[i]);
    auto fwd = model.forward_batch(batch, {});
    std::copy(fwd.cls.data().begin(), fwd.cls.data().end(),
              out.begin() + begin * static_cast<size_t>(d));
  }
  return out;
}

void ProbeConfig::validate() const {
  PF_CHECK(alpha > 0.0 && alpha < 1.0, "probe config: alpha must be in (0, 1)");
  PF_CHECK(gamma >= 0.0, "probe config: gamma must be >= 0");
  PF_CHECK(lr > 0.0 && weight_decay >= 0.0, "probe config: bad lr/weight decay");
  PF_CHECK(epochs >= 1 && batch_size >= 1, "probe config: bad epochs/batch size");
}

std::vector<double> LinearProbe::scores(const std::vector<double>& embeddings) const {
  PF_CHECK(embeddings.size() % w.size() == 0, "probe: embedding width mismatch");
  const size_t n = embeddings.size() / w.size();
  std::vector<double> s(n, b);
  for (size_t i = 0; i < n; ++i)
    for (size_t c = 0; c < w.size(); ++c) s[i] += embeddings[i * w.size() + c] * w[c];
  return s;
}

namespace {

void check_two_class(const std::vector<int>& labels, const char* op) {
  int pos = 0, neg = 0;
  for (int l : labels) {
    PF_CHECK(l == 0 || l == 1, op, ": labels must be 0/1");
    (l ? pos : neg)++;
  }
  PF_CHECK(pos >= 2 && neg >= 2, op, ": need >= 2 examples per class (", pos, " positive, ", neg,
           " negative)");
}

struct ProbeTensors {
  Tensor w, b;
};

ProbeTensors init_probe(int dim, RngStream& init_rng) {
  std::vector<double> wdata(static_cast<size_t>(dim));
  for (auto& v : wdata) v = init_rng.normal() * 0.01;
  return {Tensor::from_data({dim, 1}, std::move(wdata), true), Tensor::zeros({1}, true)};
}

Tensor batch_logits_from_embeddings(const std::vector<double>& embeddings, int dim,
                                    const std::vector<size_t>& idx, size_t begin, size_t end,
                                    const ProbeTensors& p) {
  const size_t bsz = end - begin;
  std::vector<double> xdata(bsz * static_cast<size_t>(dim));
  for (size_t i = 0; i < bsz; ++i)
    std::copy(embeddings.begin() + idx[begin + i] * dim,
              embeddings.begin() + (idx[begin + i] + 1) * dim, xdata.begin() + i * dim);
  Tensor x = Tensor::from_data({static_cast<int>(bsz), dim}, std::move(xdata));
  return reshape(linear(x, p.w, p.b), {static_cast<int>(bsz)});
}

}  // namespace

LinearProbe train_linear_probe(const std::vector<double>& embeddings, int dim,
                               const std::vector<int>& labels, const ProbeConfig& cfg) {
  cfg.validate();
  PF_CHECK(dim >= 1 && embeddings.size() == labels.size() * static_cast<size_t>(dim),
           "train_linear_probe: embedding/label size mismatch");
  check_two_class(labels, "train_linear_probe");

  RngStream root(cfg.seed);
  RngStream init_rng = root.substream("probe-init");
  RngStream order_rng = root.substream("probe-order");
  ProbeTensors p = init_probe(dim, init_rng);
  ParameterStore store;
  store.add("probe.w", p.w);
  store.add("probe.b", p.b);
  AdamW opt;

  std::vector<size_t> idx(labels.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(idx);
    for (size_t begin = 0; begin < idx.size(); begin += cfg.batch_size) {
      const size_t end = std::min(begin + cfg.batch_size, idx.size());
      Tensor logits = batch_logits_from_embeddings(embeddings, dim, idx, begin, end, p);
      std::vector<int> y(end - begin);
      for (size_t i = begin; i < end; ++i) y[i - begin] = labels[idx[i]];
      Tensor loss = focal_loss(logits, y, cfg.alpha, cfg.gamma);
      store.zero_grad();
      loss.backward();
      opt.step(store, cfg.lr, cfg.weight_decay);
    }
  }
  LinearProbe probe;
  probe.w.assign(p.w.data().begin(), p.w.data().end());
  probe.b = p.b.data()[0];
  return probe;
}

FinetuneResult finetune(PanModel& model, const std::vector<ParticipantRecord>& train,
                        const std::vector<int>& train_labels,
                        const std::vector<ParticipantRecord>& val,
                        const std::vector<int>& val_labels, const FinetuneConfig& cfg) {
  cfg.probe.validate();
  PF_CHECK(cfg.lr_backbone >= 0.0, "finetune: lr_backbone must be >= 0");
  PF_CHECK(train.size() == train_labels.size() && val.size() == val_labels.size(),
           "finetune: label count mismatch");
  check_two_class(train_labels, "finetune");

  const int d = model.config().d;
  RngStream root(cfg.probe.seed);
  RngStream init_rng = root.substream("probe-init");
  RngStream order_rng = root.substream("probe-order");
  ProbeTensors head = init_probe(d, init_rng);
  ParameterStore head_store;
  head_store.add("probe.w", head.w);
  head_store.add("probe.b", head.b);
  AdamW opt_head, opt_backbone;

  auto val_loss = [&]() {
    NoGradGuard ng;
    std::vector<double> emb = embed_cohort(model, val, DropoutSpec::none());
    std::vector<double> xdata(emb);
    Tensor x = Tensor::from_data({static_cast<int>(val.size()), d}, std::move(xdata));
    Tensor logits = reshape(linear(x, head.w, head.b), {static_cast<int>(val.size())});
    return focal_loss(logits, val_labels, cfg.probe.alpha, cfg.probe.gamma).item();
  };

  FinetuneResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_backbone, best_head;
  auto snapshot = [&] {
    best_backbone.clear();
    for (const auto& e : model.params().entries)
      best_backbone.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
    best_head.clear();
    for (const auto& e : head_store.entries)
      best_head.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  };

  std::vector<size_t> idx(train.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  int since_best = 0;
  for (int epoch = 0; epoch < cfg.probe.epochs; ++epoch) {
    order_rng.shuffle(idx);
    for (size_t begin = 0; begin < idx.size(); begin += cfg.probe.batch_size) {
      const size_t end = std::min(begin + cfg.probe.batch_size, idx.size());
      std::vector<const ParticipantRecord*> batch;
      std::vector<int> y;
      batch.reserve(end - begin);
      for (size_t i = begin; i < end; ++i) {
        batch.push_back(&train[idx[i]]);
        y.push_back(train_labels[idx[i]]);
      }
      auto fwd = model.forward_batch(batch, {});
      Tensor logits = reshape(linear(fwd.cls, head.w, head.b), {static_cast<int>(y.size())});
      Tensor loss = focal_loss(logits, y, cfg.probe.alpha, cfg.probe.gamma);
      head_store.zero_grad();
      model.params().zero_grad();
      loss.backward();
      opt_head.step(head_store, cfg.probe.lr, cfg.probe.weight_decay);
      opt_backbone.step(model.params(), cfg.lr_backbone, cfg.probe.weight_decay);
    }
    const double vl = val_loss();
    if (vl < result.best_val_loss) {
      result.best_val_loss = vl;
      result.best_epoch = epoch;
      since_best = 0;
      snapshot();
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  // restore the best epoch
  if (!best_backbone.empty()) {
    size_t i = 0;
    for (auto& e : model.params().entries) {
      auto dst = e.tensor.data_mut();
      std::copy(best_backbone[i].begin(), best_backbone[i].end(), dst.begin());
      ++i;
    }
    i = 0;
    for (auto& e : head_store.entries) {
      auto dst = e.tensor.data_mut();
      std::copy(best_head[i].begin(), best_head[i].end(), dst.begin());
      ++i;
    }
  }
  result.head.w.assign(head.w.data().begin(), head.w.data().end());
  result.head.b = head.b.data()[0];
  return result;
}

namespace {

std::vector<int> task_labels(const std::vector<ParticipantRecord>& recs,
                             const std::string& task) {
  std::vector<int> out;
  out.reserve(recs.size());
  for (const auto& r : recs) {
    auto it = r.labels.find(task);
    PF_CHECK(it != r.labels.end(), "eval: record ", r.id, " lacks task '", task, "'");
    out.push_back(it->second);
  }
  return out;
}

std::vector<ParticipantRecord> complete_subset(const std::vector<ParticipantRecord>& recs) {
  std::vector<ParticipantRecord> out;
  for (const auto& r : recs)
    if (r.complete()) out.push_back(r);
  return out;
}

struct TrainedProbes {
  // probes[task][probe_seed_index]
  std::vector<std::vector<LinearProbe>> probes;
  std::vector<uint64_t> seeds;
};

TrainedProbes train_probes(const PanModel& model, const std::vector<ParticipantRecord>& train,
                           const std::vector<std::string>& tasks, const ProbeConfig& cfg,
                           int probe_seeds) {
  TrainedProbes out;
  const std::vector<double> emb = embed_cohort(model, train, DropoutSpec::none());
  out.probes.resize(tasks.size());
  for (int s = 0; s < probe_seeds; ++s) out.seeds.push_back(cfg.seed + static_cast<uint64_t>(s));
  for (size_t t = 0; t < tasks.size(); ++t) {
    auto labels = task_labels(train, tasks[t]);
    for (int s = 0; s < probe_seeds; ++s) {
      ProbeConfig c = cfg;
      c.seed = out.seeds[static_cast<size_t>(s)];
      out.probes[t].push_back(train_linear_probe(emb, model.config().d, labels, c));
    }
  }
  return out;
}

}  // namespace

std::vector<MetricsRow> organ_dropout_eval(const PanModel& model, const OrganSchema& schema,
                                           const std::vector<ParticipantRecord>& train,
                                           const std::vector<ParticipantRecord>& test,
                                           const std::vector<std::string>& tasks,
                                           const ProbeConfig& probe_cfg,
                                           const EvalProtocols& protocols) {
  PF_CHECK(!tasks.empty(), "organ_dropout_eval: no tasks");
  PF_CHECK(protocols.probe_seeds >= 1 && protocols.dropout_seeds >= 1,
           "organ_dropout_eval: seed counts must be >= 1");
  for (int k : protocols.drop_k)
    PF_CHECK(k >= 0 && k < schema.organ_count(), "organ_dropout_eval: drop-", k,
             " infeasible for ", schema.organ_count(), " organs");

  const auto trained = train_probes(model, train, tasks, probe_cfg, protocols.probe_seeds);
  const auto complete = complete_subset(test);
  const bool needs_complete = protocols.full || !protocols.drop_k.empty() || protocols.specific;
  PF_CHECK(!needs_complete || !complete.empty(),
           "organ_dropout_eval: no complete-organ participants in the test split");

  std::vector<MetricsRow> rows;
  auto emit = [&](const std::string& label, const std::vector<ParticipantRecord>& subset,
                  const DropoutSpec& spec, uint64_t dropout_seed) {
    const auto emb = embed_cohort(model, subset, spec);
    for (size_t t = 0; t < tasks.size(); ++t) {
      const auto labels = task_labels(subset, tasks[t]);
      for (size_t s = 0; s < trained.seeds.size(); ++s) {
        const auto scores = trained.probes[t][s].scores(emb);
        rows.push_back({tasks[t], label, auroc(scores, labels), balanced_accuracy(scores, labels),
                        trained.seeds[s], dropout_seed});
      }
    }
  };

  if (protocols.standard) emit("standard", test, DropoutSpec::none(), 0);
  if (protocols.full) emit("full", complete, DropoutSpec::none(), 0);
  for (int k : protocols.drop_k)
    for (int ds = 0; ds < protocols.dropout_seeds; ++ds)
      emit("drop" + std::to_string(k), complete, DropoutSpec::random_k(k, ds),
           static_cast<uint64_t>(ds));
  if (protocols.specific)
    for (int o = 0; o < schema.organ_count(); ++o)
      emit("wo_" + schema.organs()[o].name, complete, DropoutSpec::specific({o}), 0);
  return rows;
}

std::vector<double> pairwise_dropout_heatmap(const PanModel& model, const OrganSchema& schema,
                                             const std::vector<ParticipantRecord>& train,
                                             const std::vector<ParticipantRecord>& test,
                                             const std::vector<std::string>& tasks,
                                             const ProbeConfig& probe_cfg, int probe_seeds) {
  const auto trained = train_probes(model, train, tasks, probe_cfg, probe_seeds);
  const auto complete = complete_subset(test);
  PF_CHECK(!complete.empty(), "pairwise_dropout_heatmap: complete-organ subset is empty");
  const int O = schema.organ_count();
  std::vector<double> heat(static_cast<size_t>(O) * O,
                           std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < O; ++i) {
    for (int j = 0; j <= i; ++j) {
      std::vector<int> drop = i == j ? std::vector<int>{i} : std::vector<int>{j, i};
      const auto emb = embed_cohort(model, complete, DropoutSpec::specific(drop));
      double acc = 0.0;
      int n = 0;
      for (size_t t = 0; t < tasks.size(); ++t) {
        const auto labels = task_labels(complete, tasks[t]);
        for (const auto& probe : trained.probes[t]) {
          acc += auroc(probe.scores(emb), labels);
          ++n;
        }
      }
      heat[static_cast<size_t>(i) * O + j] = acc / n;
    }
  }
  return heat;
}

std::vector<ImportanceRow> leave_one_out_importance(const PanModel& model,
                                                    const OrganSchema& schema,
                                                    const std::vector<ParticipantRecord>& train,
                                                    const std::vector<ParticipantRecord>& test,
                                                    const std::vector<std::string>& tasks,
                                                    const ProbeConfig& probe_cfg,
                                                    int probe_seeds) {
  const auto trained = train_probes(model, train, tasks, probe_cfg, probe_seeds);

  // organs never observed in the evaluated records are undefined, not zero
  std::vector<uint8_t> observed(schema.organ_count(), 0);
  for (const auto& r : test)
    for (int o = 0; o < schema.organ_count(); ++o)
      if (r.organs[static_cast<size_t>(o)]) observed[o] = 1;

  // completeness over the observed organs
  std::vector<ParticipantRecord> subset;
  for (const auto& r : test) {
    bool ok = true;
    for (int o = 0; o < schema.organ_count(); ++o)
      if (observed[o] && !r.organs[static_cast<size_t>(o)]) ok = false;
    if (ok) subset.push_back(r);
  }
  PF_CHECK(!subset.empty(), "leave_one_out_importance: no participants complete over observed organs");

  const auto emb_full = embed_cohort(model, subset, DropoutSpec::none());
  std::vector<ImportanceRow> rows;
  for (int o = 0; o < schema.organ_count(); ++o) {
    if (!observed[o]) continue;
    const auto emb_drop = embed_cohort(model, subset, DropoutSpec::specific({o}));
    for (size_t t = 0; t < tasks.size(); ++t) {
      const auto labels = task_labels(subset, tasks[t]);
      double delta = 0.0;
      for (const auto& probe : trained.probes[t])
        delta += auroc(probe.scores(emb_full), labels) - auroc(probe.scores(emb_drop), labels);
      delta = 100.0 * delta / static_cast<double>(trained.probes[t].size());
      rows.push_back({schema.organs()[o].name, tasks[t], delta});
    }
  }
  return rows;
}

std::vector<TrajectoryRow> saliency_trajectory(
    const std::vector<std::pair<int64_t, std::string>>& checkpoints, const OrganSchema& schema,
    const ModelConfig& mcfg, const std::vector<ParticipantRecord>& sample, SaliencyProxy proxy) {
  PF_CHECK(!checkpoints.empty(), "saliency_trajectory: no checkpoints");
  PF_CHECK(!sample.empty(), "saliency_trajectory: empty sample");
  std::vector<TrajectoryRow> rows;
  for (const auto& [step, dir] : checkpoints) {
    PanModel model = load_model(schema, mcfg, dir);
    NoGradGuard ng;
    const CaptureMode mode =
        proxy == SaliencyProxy::Rollout ? CaptureMode::Full : CaptureMode::ClsRows;
    std::vector<double> shares(schema.organ_count(), 0.0);
    double cls_self = 0.0;
    constexpr size_t kChunk = 64;
    for (size_t begin = 0; begin < sample.size(); begin += kChunk) {
      const size_t end = std::min(begin + kChunk, sample.size());
      std::vector<const ParticipantRecord*> batch;
      for (size_t i = begin; i < end; ++i) batch.push_back(&sample[i]);
      auto fwd = model.forward_batch(batch, {}, mode);
      for (size_t b = 0; b < batch.size(); ++b) {
        auto cap = PanModel::slice_capture(fwd.capture, static_cast<int>(b));
        double cs = 0.0;
        auto s = organ_saliency(cap, schema, batch[b]->availability(), proxy, &cs);
        for (int o = 0; o < schema.organ_count(); ++o)
          if (std::isfinite(s[o])) shares[o] += s[o] / static_cast<double>(sample.size());
        cls_self += cs / static_cast<double>(sample.size());
      }
    }
    for (int o = 0; o < schema.organ_count(); ++o)
      rows.push_back({step, schema.organs()[o].name, shares[o]});
    rows.push_back({step, "cls_self", cls_self});
  }
  return rows;
}

PanModel load_model(const OrganSchema& schema, const ModelConfig& mcfg,
                    const std::string& ckpt_dir) {
  PanModel model(schema, mcfg, 0);
  load_checkpoint(model.params(), ckpt_dir);
  return model;
}

}  // namespace panfm
