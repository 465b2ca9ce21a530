#include "panfm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "panfm/checkpoint.hpp"
#include "panfm/objectives.hpp"
#include "panfm/util.hpp"

namespace panfm {

namespace fs = std::filesystem;
using nlohmann::json;

Objective parse_objective(const std::string& s) {
  if (s == "dino") return Objective::Dino;
  if (s == "ntxent") return Objective::NTXent;
  if (s == "vicreg") return Objective::VICReg;
  if (s == "barlow") return Objective::Barlow;
  fail(msg("unknown objective '", s, "' (expected dino|ntxent|vicreg|barlow)"));
}

std::string objective_name(Objective o) {
  switch (o) {
    case Objective::Dino: return "dino";
    case Objective::NTXent: return "ntxent";
    case Objective::VICReg: return "vicreg";
    case Objective::Barlow: return "barlow";
  }
  return "?";
}

MaskStrategy parse_strategy(const std::string& s) {
  if (s == "sgm") return MaskStrategy::SGM;
  if (s == "random") return MaskStrategy::Random;
  fail(msg("unknown masking strategy '", s, "' (expected sgm|random)"));
}

std::string strategy_name(MaskStrategy s) {
  return s == MaskStrategy::SGM ? "sgm" : "random";
}

void PretrainConfig::validate() const {
  PF_CHECK(epochs >= 1 && batch_size >= 2, "pretrain config: epochs >= 1 and batch_size >= 2");
  PF_CHECK(lr >= 0.0 && lr_end >= 0.0 && warmup_epochs >= 0, "pretrain config: bad lr schedule");
  PF_CHECK(teacher_temp_start > 0.0 && teacher_temp_end > 0.0 && student_temp > 0.0,
           "pretrain config: temperatures must be > 0");
  PF_CHECK(center_momentum >= 0.0 && center_momentum <= 1.0 && ema_start >= 0.0 &&
               ema_end <= 1.0,
           "pretrain config: momenta must be in [0, 1]");
  PF_CHECK(r_mask > 0.0 && r_mask < 1.0, "pretrain config: r_mask must be in (0, 1)");
  PF_CHECK(tau_sgm > 0.0, "pretrain config: tau_sgm must be > 0");
  PF_CHECK(plugin_dim >= 1, "pretrain config: plugin_dim must be >= 1");
}

PretrainConfig load_pretrain_config(const std::string& path) {
  std::ifstream f(path);
  PF_CHECK(f.good(), "pretrain config: cannot open ", path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail(msg("pretrain config: parse error in ", path, ": ", e.what()));
  }
  PretrainConfig c;
  c.objective = parse_objective(j.value("objective", "dino"));
  c.strategy = parse_strategy(j.value("strategy", "sgm"));
  c.proxy = parse_proxy(j.value("proxy", "a2"));
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.lr_end = j.value("lr_end", c.lr_end);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.wd_start = j.value("wd_start", c.wd_start);
  c.wd_end = j.value("wd_end", c.wd_end);
  c.ema_start = j.value("ema_start", c.ema_start);
  c.ema_end = j.value("ema_end", c.ema_end);
  c.teacher_temp_start = j.value("teacher_temp_start", c.teacher_temp_start);
  c.teacher_temp_end = j.value("teacher_temp_end", c.teacher_temp_end);
  c.teacher_temp_warmup_epochs = j.value("teacher_temp_warmup_epochs", c.teacher_temp_warmup_epochs);
  c.student_temp = j.value("student_temp", c.student_temp);
  c.center_momentum = j.value("center_momentum", c.center_momentum);
  c.koleo_weight = j.value("koleo_weight", c.koleo_weight);
  c.r_mask = j.value("r_mask", c.r_mask);
  c.tau_sgm = j.value("tau_sgm", c.tau_sgm);
  c.ntxent_temp = j.value("ntxent_temp", c.ntxent_temp);
  c.vicreg_mu = j.value("vicreg_mu", c.vicreg_mu);
  c.vicreg_nu = j.value("vicreg_nu", c.vicreg_nu);
  c.vicreg_xi = j.value("vicreg_xi", c.vicreg_xi);
  c.vicreg_gamma = j.value("vicreg_gamma", c.vicreg_gamma);
  c.barlow_lambda_off = j.value("barlow_lambda_off", c.barlow_lambda_off);
  c.plugin_dim = j.value("plugin_dim", c.plugin_dim);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every_epochs = j.value("checkpoint_every_epochs", c.checkpoint_every_epochs);
  c.saliency_log_every = j.value("saliency_log_every", c.saliency_log_every);
  c.validate();
  return c;
}

void save_pretrain_config(const PretrainConfig& c, const std::string& path) {
  json j{{"objective", objective_name(c.objective)},
         {"strategy", strategy_name(c.strategy)},
         {"proxy", proxy_name(c.proxy)},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"lr", c.lr},
         {"lr_end", c.lr_end},
         {"warmup_epochs", c.warmup_epochs},
         {"wd_start", c.wd_start},
         {"wd_end", c.wd_end},
         {"ema_start", c.ema_start},
         {"ema_end", c.ema_end},
         {"teacher_temp_start", c.teacher_temp_start},
         {"teacher_temp_end", c.teacher_temp_end},
         {"teacher_temp_warmup_epochs", c.teacher_temp_warmup_epochs},
         {"student_temp", c.student_temp},
         {"center_momentum", c.center_momentum},
         {"koleo_weight", c.koleo_weight},
         {"r_mask", c.r_mask},
         {"tau_sgm", c.tau_sgm},
         {"ntxent_temp", c.ntxent_temp},
         {"vicreg_mu", c.vicreg_mu},
         {"vicreg_nu", c.vicreg_nu},
         {"vicreg_xi", c.vicreg_xi},
         {"vicreg_gamma", c.vicreg_gamma},
         {"barlow_lambda_off", c.barlow_lambda_off},
         {"plugin_dim", c.plugin_dim},
         {"seed", c.seed},
         {"checkpoint_every_epochs", c.checkpoint_every_epochs},
         {"saliency_log_every", c.saliency_log_every}};
  std::ofstream f(path);
  PF_CHECK(f.good(), "pretrain config: cannot write ", path);
  f << j.dump(2) << "\n";
}

Tensor Projector::forward(const Tensor& x) const {
  PF_CHECK(!w.empty(), "projector: not initialized");
  Tensor h = x;
  for (size_t i = 0; i < w.size(); ++i) {
    h = linear(h, w[i], b[i]);
    if (i + 1 < w.size()) h = gelu(h);
  }
  return h;
}

namespace {

Projector make_projector(Objective obj, int d, int out_dim, RngStream& rng) {
  std::vector<int> dims;
  if (obj == Objective::NTXent)
    dims = {d, 2 * d, out_dim};  // 2-layer projector
  else
    dims = {d, out_dim, out_dim, out_dim};  // 3-layer expander
  Projector p;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    std::vector<double> wdata(static_cast<size_t>(dims[i]) * dims[i + 1]);
    for (auto& v : wdata) v = rng.normal() * 0.02;
    p.w.push_back(Tensor::from_data({dims[i], dims[i + 1]}, std::move(wdata), true));
    p.b.push_back(Tensor::zeros({dims[i + 1]}, true));
  }
  return p;
}

void register_projector(ParameterStore& store, Projector& p, const std::string& prefix) {
  for (size_t i = 0; i < p.w.size(); ++i) {
    store.add(prefix + ".w" + std::to_string(i), p.w[i]);
    store.add(prefix + ".b" + std::to_string(i), p.b[i]);
  }
}

ParameterStore combined_store(PanModel& model, Projector* proj) {
  ParameterStore s;
  for (auto& e : model.params().entries) s.add(e.name, e.tensor);
  if (proj) register_projector(s, *proj, "projector");
  return s;
}

}  // namespace

Trainer::Trainer(const OrganSchema& schema, const ModelConfig& mcfg, const PretrainConfig& cfg,
                 std::vector<ParticipantRecord> cohort)
    : schema_(schema),
      mcfg_(mcfg),
      cfg_(cfg),
      cohort_(std::move(cohort)),
      data_rng_(RngStream(cfg.seed).substream("data-order")),
      mask_rng_(RngStream(cfg.seed).substream("masking")) {
  cfg_.validate();
  PF_CHECK(static_cast<int>(cohort_.size()) >= cfg_.batch_size,
           "trainer: cohort smaller than one batch");
  student_ = std::make_unique<PanModel>(schema_, mcfg_, cfg_.seed);
  teacher_ = std::make_unique<PanModel>(student_->clone());

  const bool plugin = cfg_.objective != Objective::Dino;
  if (plugin) {
    RngStream prng = RngStream(cfg_.seed).substream("projector-init");
    student_proj_ = make_projector(cfg_.objective, mcfg_.d, cfg_.plugin_dim, prng);
    RngStream trng = RngStream(cfg_.seed).substream("projector-init");
    teacher_proj_ = make_projector(cfg_.objective, mcfg_.d, cfg_.plugin_dim, trng);
  }
  student_params_ = combined_store(*student_, plugin ? &student_proj_ : nullptr);
  teacher_params_ = combined_store(*teacher_, plugin ? &teacher_proj_ : nullptr);

  const int64_t steps_per_epoch =
      static_cast<int64_t>((cohort_.size() + cfg_.batch_size - 1) / cfg_.batch_size);
  total_steps_ = steps_per_epoch * cfg_.epochs;
  const int64_t warmup = std::min<int64_t>(static_cast<int64_t>(cfg_.warmup_epochs) * steps_per_epoch,
                                           total_steps_);
  lr_sched_ = Schedule::warmup_cosine(0.0, cfg_.lr, cfg_.lr_end, warmup, total_steps_);
  wd_sched_ = Schedule::cosine(cfg_.wd_start, cfg_.wd_end, total_steps_);
  ema_sched_ = Schedule::cosine(cfg_.ema_start, cfg_.ema_end, total_steps_);
  const int64_t twarm = std::min<int64_t>(
      static_cast<int64_t>(cfg_.teacher_temp_warmup_epochs) * steps_per_epoch, total_steps_);
  temp_sched_ = Schedule::warmup_cosine(cfg_.teacher_temp_start, cfg_.teacher_temp_end,
                                        cfg_.teacher_temp_end, twarm, total_steps_);
  center_.assign(static_cast<size_t>(mcfg_.proto_dim), 0.0);
}

double Trainer::step(const std::vector<const ParticipantRecord*>& batch) {
  const int B = static_cast<int>(batch.size());
  PF_CHECK(B >= 2, "trainer: batch must have >= 2 participants");
  const bool distill = cfg_.objective == Objective::Dino;
  const bool sgm = cfg_.strategy == MaskStrategy::SGM;
  const bool log_step =
      cfg_.saliency_log_every > 0 && (step_ % cfg_.saliency_log_every == 0);

  CaptureMode capture = CaptureMode::None;
  if (sgm || log_step)
    capture = cfg_.proxy == SaliencyProxy::Rollout ? CaptureMode::Full : CaptureMode::ClsRows;

  // teacher: full view, no gradients, attention capture
  PanModel::Forward teacher_fwd;
  Tensor teacher_logits;
  {
    NoGradGuard ng;
    teacher_fwd = teacher_->forward_batch(batch, {}, capture);
    if (distill) teacher_logits = teacher_->project_head(teacher_fwd.cls);
  }

  // per-participant mask sets
  std::vector<std::vector<uint8_t>> masks(batch.size());
  std::vector<SaliencyReport> reports;
  for (int b = 0; b < B; ++b) {
    const auto avail = batch[b]->availability();
    int n_avail = 0;
    for (uint8_t a : avail) n_avail += a;
    std::vector<int> mask_set;
    if (sgm) {
      auto cap = PanModel::slice_capture(teacher_fwd.capture, b);
      SaliencyReport rep = saliency_report(cap, schema_, avail, cfg_.proxy, cfg_.tau_sgm);
      const int n_mask = sample_mask_budget(n_avail, cfg_.r_mask, mask_rng_);
      mask_set = sample_mask_set(rep.mask_prob, n_mask, mask_rng_);
      if (log_step) reports.push_back(std::move(rep));
    } else {
      mask_set = random_mask_set(avail, cfg_.r_mask, mask_rng_);
      if (log_step && capture != CaptureMode::None) {
        auto cap = PanModel::slice_capture(teacher_fwd.capture, b);
        reports.push_back(saliency_report(cap, schema_, avail, cfg_.proxy, cfg_.tau_sgm));
      }
    }
    masks[b].assign(schema_.organ_count(), 0);
    for (int o : mask_set) masks[b][o] = 1;
  }

  student_->set_head_frozen(distill && epoch_ == 0);

  Tensor loss;
  if (distill) {
    auto student_fwd = student_->forward_batch(batch, masks);
    Tensor student_logits = student_->project_head(student_fwd.cls);
    const double tau_t = temp_sched_.eval(std::min(step_, total_steps_));
    Tensor lg = dino_global_loss(student_logits, teacher_logits, center_, cfg_.student_temp,
                                 tau_t);
    Tensor lk = koleo_loss(student_fwd.cls);
    loss = add(lg, mul_scalar(lk, cfg_.koleo_weight));
    last_lg_ = lg.item();
    last_lk_ = lk.item();
    update_center(center_, teacher_logits, cfg_.center_momentum);
  } else {
    // two student views through the shared projector
    auto full_fwd = student_->forward_batch(batch, {});
    auto mask_fwd = student_->forward_batch(batch, masks);
    Tensor z1 = student_proj_.forward(full_fwd.cls);
    Tensor z2 = student_proj_.forward(mask_fwd.cls);
    switch (cfg_.objective) {
      case Objective::NTXent: loss = ntxent_loss(z1, z2, cfg_.ntxent_temp); break;
      case Objective::VICReg:
        loss = vicreg_loss(z1, z2, cfg_.vicreg_mu, cfg_.vicreg_nu, cfg_.vicreg_xi,
                           cfg_.vicreg_gamma);
        break;
      case Objective::Barlow: loss = barlow_loss(z1, z2, cfg_.barlow_lambda_off); break;
      default: fail("trainer: unreachable objective");
    }
    last_lg_ = loss.item();
    last_lk_ = 0.0;
  }

  const double total = loss.item();
  PF_CHECK(std::isfinite(total), "trainer: non-finite loss at step ", step_);

  student_params_.zero_grad();
  loss.backward();
  const int64_t s = std::min(step_, total_steps_);  // bench may run past the horizon
  opt_.step(student_params_, lr_sched_.eval(s), wd_sched_.eval(s));
  ema_update(teacher_params_, student_params_, ema_sched_.eval(s));

  if (log_step && !reports.empty()) maybe_log_saliency(batch, reports);
  ++step_;
  return total;
}

void Trainer::maybe_log_saliency(const std::vector<const ParticipantRecord*>& batch,
                                 const std::vector<SaliencyReport>& reports) {
  json organs = json::object();
  double cls_self = 0.0;
  for (int o = 0; o < schema_.organ_count(); ++o) {
    double s = 0.0, p = 0.0;
    int n = 0;
    for (const auto& rep : reports) {
      if (!std::isfinite(rep.saliency[o])) continue;
      s += rep.saliency[o];
      p += rep.mask_prob[o];
      ++n;
    }
    if (n == 0)
      organs[schema_.organs()[o].name] = nullptr;
    else
      organs[schema_.organs()[o].name] = {{"s", s / n}, {"p", p / n}};
  }
  for (const auto& rep : reports) cls_self += rep.cls_self_mass / reports.size();
  json row{{"step", step_}, {"cls_self_mass", cls_self}, {"organs", organs}};
  (void)batch;
  saliency_rows_.push_back(row.dump());
}

void Trainer::write_checkpoint(const std::string& out_dir, int64_t step) {
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt-%08lld", static_cast<long long>(step));
  save_checkpoint(student_params_, (fs::path(out_dir) / name).string());
  // teacher weights carry the evaluation-time representation
  save_checkpoint(teacher_params_, (fs::path(out_dir) / (std::string(name) + "-teacher")).string());
}

const std::vector<double>& Trainer::run(const std::string& out_dir) {
  const bool writing = !out_dir.empty();
  if (writing) {
    fs::create_directories(out_dir);
    write_checkpoint(out_dir, 0);
  }
  std::vector<size_t> order(cohort_.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (epoch_ = 0; epoch_ < cfg_.epochs; ++epoch_) {
    data_rng_.shuffle(order);
    double epoch_loss = 0.0;
    int64_t batches = 0;
    for (size_t begin = 0; begin < order.size(); begin += cfg_.batch_size) {
      size_t end = std::min(begin + cfg_.batch_size, order.size());
      // avoid a trailing batch of one participant
      if (order.size() - begin < 2) break;
      std::vector<const ParticipantRecord*> batch;
      batch.reserve(end - begin);
      for (size_t i = begin; i < end; ++i) batch.push_back(&cohort_[order[i]]);

      double total;
      try {
        total = step(batch);
      } catch (const std::exception& e) {
        if (writing) {
          log_warn(msg("trainer: aborting at step ", step_, ": ", e.what()));
          std::ofstream f(fs::path(out_dir) / "loss_log.csv");
          f << "step,epoch,total,l_g,l_k,lr,wd,m,tau_t\n";
          for (const auto& r : loss_rows_) f << r << "\n";
        }
        throw;
      }
      epoch_loss += total;
      ++batches;

      char row[256];
      std::snprintf(row, sizeof(row), "%lld,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g",
                    static_cast<long long>(step_ - 1), epoch_, total, last_lg_, last_lk_,
                    lr_sched_.eval(step_ - 1), wd_sched_.eval(step_ - 1),
                    ema_sched_.eval(step_ - 1), temp_sched_.eval(step_ - 1));
      loss_rows_.emplace_back(row);
    }
    epoch_losses_.push_back(epoch_loss / static_cast<double>(batches));
    if (writing && cfg_.checkpoint_every_epochs > 0 &&
        (epoch_ + 1) % cfg_.checkpoint_every_epochs == 0 && epoch_ + 1 < cfg_.epochs)
      write_checkpoint(out_dir, step_);
  }

  if (writing) {
    write_checkpoint(out_dir, step_);
    save_checkpoint(teacher_params_, (fs::path(out_dir) / "ckpt-final").string());
    save_checkpoint(student_params_, (fs::path(out_dir) / "ckpt-final-student").string());
    {
      std::ofstream f(fs::path(out_dir) / "loss_log.csv");
      f << "step,epoch,total,l_g,l_k,lr,wd,m,tau_t\n";
      for (const auto& r : loss_rows_) f << r << "\n";
    }
    if (cfg_.saliency_log_every > 0) {
      std::ofstream f(fs::path(out_dir) / "saliency_log.jsonl");
      for (const auto& r : saliency_rows_) f << r << "\n";
    }
  }
  return epoch_losses_;
}

std::vector<double> Trainer::teacher_saliency_shares(
    const std::vector<const ParticipantRecord*>& sample, double* cls_self) const {
  PF_CHECK(!sample.empty(), "teacher_saliency_shares: empty sample");
  NoGradGuard ng;
  const CaptureMode mode =
      cfg_.proxy == SaliencyProxy::Rollout ? CaptureMode::Full : CaptureMode::ClsRows;
  auto fwd = teacher_->forward_batch(sample, {}, mode);
  std::vector<double> shares(schema_.organ_count(), 0.0);
  double self_mass = 0.0;
  for (size_t b = 0; b < sample.size(); ++b) {
    auto cap = PanModel::slice_capture(fwd.capture, static_cast<int>(b));
    double cs = 0.0;
    auto s = organ_saliency(cap, schema_, sample[b]->availability(), cfg_.proxy, &cs);
    for (int o = 0; o < schema_.organ_count(); ++o)
      if (std::isfinite(s[o])) shares[o] += s[o] / sample.size();
    self_mass += cs / sample.size();
  }
  if (cls_self) *cls_self = self_mass;
  return shares;
}

OverheadReport bench_overhead(const OrganSchema& schema, const ModelConfig& mcfg,
                              const PretrainConfig& base_cfg,
                              const std::vector<ParticipantRecord>& cohort,
                              const ParameterStore& weights, MaskStrategy a, MaskStrategy b,
                              int iters, int warmup) {
  PF_CHECK(iters >= 1, "bench_overhead: iters must be >= 1");
  PF_CHECK(warmup >= 0, "bench_overhead: warmup must be >= 0");

  auto run_side = [&](MaskStrategy strat, std::vector<double>& times_ms) {
    PretrainConfig cfg = base_cfg;
    cfg.strategy = strat;
    cfg.saliency_log_every = 0;
    Trainer t(schema, mcfg, cfg, cohort);
    // identical weights on both sides
    for (size_t i = 0; i < t.student().params().entries.size(); ++i) {
      const Tensor* w = weights.find(t.student().params().entries[i].name);
      if (!w) continue;
      auto dst = t.student().params().entries[i].tensor.data_mut();
      std::copy(w->data().begin(), w->data().end(), dst.begin());
    }
    t.teacher().params().copy_values_from(t.student().params());

    // fixed batch order shared by both sides
    const int B = cfg.batch_size;
    std::vector<const ParticipantRecord*> batch(B);
    times_ms.reserve(iters);
    for (int it = 0; it < warmup + iters; ++it) {
      for (int i = 0; i < B; ++i)
        batch[i] = &cohort[(static_cast<size_t>(it) * B + i) % cohort.size()];
      const auto t0 = std::chrono::steady_clock::now();
      t.step(batch);
      const auto t1 = std::chrono::steady_clock::now();
      if (it >= warmup)
        times_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  };

  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0.0;
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size()));
  };

  OverheadReport rep;
  std::vector<double> ta, tb;
  run_side(a, ta);
  run_side(b, tb);
  stats(ta, rep.mean_a_ms, rep.std_a_ms);
  stats(tb, rep.mean_b_ms, rep.std_b_ms);
  rep.delta_percent = 100.0 * (rep.mean_a_ms - rep.mean_b_ms) / rep.mean_b_ms;
  return rep;
}

}  // namespace panfm
