#include "panfm/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "panfm/checkpoint.hpp"
#include "panfm/eval.hpp"
#include "panfm/manifest.hpp"
#include "panfm/metrics.hpp"
#include "panfm/util.hpp"

namespace panfm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::array<double, 4> read_split_fractions(const std::string& gen_config_path) {
  std::ifstream f(gen_config_path);
  PF_CHECK(f.good(), "gen config: cannot open ", gen_config_path);
  json j;
  f >> j;
  std::array<double, 4> fr{0.65, 0.2, 0.05, 0.1};
  if (j.contains("split_fractions")) {
    auto v = j["split_fractions"].get<std::vector<double>>();
    PF_CHECK(v.size() == 4, "gen config: split_fractions must have 4 entries");
    std::copy(v.begin(), v.end(), fr.begin());
  }
  return fr;
}

void write_id_list(json& out, const char* key, const std::vector<ParticipantRecord>& recs) {
  std::vector<int64_t> ids;
  ids.reserve(recs.size());
  for (const auto& r : recs) ids.push_back(r.id);
  out[key] = ids;
}

bool outputs_exist(const std::vector<std::string>& outputs) {
  for (const auto& o : outputs)
    if (!fs::exists(o)) {
      log_warn(msg("declared output missing: ", o));
      return false;
    }
  return true;
}

}  // namespace

int cmd_gen_data(const GenDataArgs& args) {
  RunManifest manifest;
  manifest.command = "gen-data";
  manifest.stamp_start();
  manifest.add_input(args.schema_path);
  manifest.add_input(args.gen_config_path);

  OrganSchema schema = load_schema(args.schema_path);
  CohortGenConfig cfg = load_gen_config(args.gen_config_path);
  if (args.seed) cfg.seed = *args.seed;
  cfg.validate(schema);
  const auto fractions = read_split_fractions(args.gen_config_path);

  auto cohort = generate_cohort(cfg, schema);
  auto splits = split_cohort(cohort, fractions, cfg.seed);
  PF_CHECK(!splits.pretrain.empty(), "gen-data: pretrain split is empty; adjust split_fractions");
  auto stats = compute_norm_stats(splits.pretrain, schema);

  fs::create_directories(args.out_dir);
  const fs::path out(args.out_dir);
  save_schema(schema, (out / "schema.json").string());
  save_gen_config(cfg, (out / "gen_config.json").string());
  write_jsonl(cohort, schema, (out / "cohort.jsonl").string());
  save_norm_stats(stats, schema, (out / "norm_stats.json").string());
  {
    json sj;
    write_id_list(sj, "pretrain", splits.pretrain);
    write_id_list(sj, "train", splits.train);
    write_id_list(sj, "val", splits.val);
    write_id_list(sj, "test", splits.test);
    std::ofstream f(out / "splits.json");
    f << sj.dump(2) << "\n";
  }

  manifest.seed = cfg.seed;
  manifest.config = {{"schema", args.schema_path},
                     {"participants", cfg.participants},
                     {"split_fractions", fractions},
                     {"seed", cfg.seed}};
  for (const char* name : {"schema.json", "gen_config.json", "cohort.jsonl", "norm_stats.json",
                           "splits.json"})
    manifest.outputs.push_back((out / name).string());
  manifest.stamp_end();
  manifest.write(args.out_dir);
  return outputs_exist(manifest.outputs) ? 0 : 1;
}

LoadedData load_data_dir(const std::string& data_dir) {
  const fs::path dir(data_dir);
  LoadedData d;
  d.schema = load_schema((dir / "schema.json").string());
  auto cohort = read_jsonl(d.schema, (dir / "cohort.jsonl").string());
  d.stats = load_norm_stats(d.schema, (dir / "norm_stats.json").string());

  std::ifstream f(dir / "splits.json");
  PF_CHECK(f.good(), "data dir: missing splits.json in ", data_dir);
  json sj;
  f >> sj;
  std::map<int64_t, const ParticipantRecord*> by_id;
  for (const auto& r : cohort) by_id[r.id] = &r;
  auto take = [&](const char* key) {
    std::vector<ParticipantRecord> out;
    for (int64_t id : sj.at(key).get<std::vector<int64_t>>()) {
      auto it = by_id.find(id);
      PF_CHECK(it != by_id.end(), "data dir: split id ", id, " not present in cohort.jsonl");
      out.push_back(normalize(*it->second, d.stats));
    }
    return out;
  };
  d.pretrain = take("pretrain");
  d.train = take("train");
  d.val = take("val");
  d.test = take("test");
  return d;
}

int cmd_pretrain(const PretrainArgs& args) {
  RunManifest manifest;
  manifest.command = "pretrain";
  manifest.stamp_start();

  PretrainConfig cfg;
  if (!args.config_path.empty()) {
    cfg = load_pretrain_config(args.config_path);
    manifest.add_input(args.config_path);
  }
  if (args.strategy) cfg.strategy = parse_strategy(*args.strategy);
  if (args.objective) cfg.objective = parse_objective(*args.objective);
  if (args.proxy) cfg.proxy = parse_proxy(*args.proxy);
  if (args.seed) cfg.seed = *args.seed;

  ModelConfig mcfg;
  if (!args.model_config_path.empty()) {
    mcfg = load_model_config(args.model_config_path);
    manifest.add_input(args.model_config_path);
  }

  for (const char* name : {"schema.json", "cohort.jsonl", "norm_stats.json", "splits.json"})
    manifest.add_input((fs::path(args.data_dir) / name).string());
  LoadedData data = load_data_dir(args.data_dir);

  fs::create_directories(args.out_dir);
  save_pretrain_config(cfg, (fs::path(args.out_dir) / "pretrain.json").string());
  save_model_config(mcfg, (fs::path(args.out_dir) / "model.json").string());
  save_schema(data.schema, (fs::path(args.out_dir) / "schema.json").string());

  Trainer trainer(data.schema, mcfg, cfg, data.pretrain);
  try {
    trainer.run(args.out_dir);
  } catch (const std::exception& e) {
    log_warn(msg("pretrain aborted: ", e.what()));
    manifest.stamp_end();
    manifest.config = {{"error", e.what()}};
    manifest.write(args.out_dir);
    return 1;
  }

  manifest.seed = cfg.seed;
  {
    std::ifstream f(fs::path(args.out_dir) / "pretrain.json");
    f >> manifest.config;
  }
  manifest.outputs = {(fs::path(args.out_dir) / "ckpt-final" / "params.bin").string(),
                      (fs::path(args.out_dir) / "loss_log.csv").string()};
  manifest.stamp_end();
  manifest.write(args.out_dir);
  return outputs_exist(manifest.outputs) ? 0 : 1;
}

EvalConfig load_eval_config(const std::string& path) {
  std::ifstream f(path);
  PF_CHECK(f.good(), "eval config: cannot open ", path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail(msg("eval config: parse error in ", path, ": ", e.what()));
  }
  EvalConfig c;
  if (j.contains("protocols")) c.protocols = j["protocols"].get<std::vector<std::string>>();
  c.probe_seeds = j.value("probe_seeds", c.probe_seeds);
  c.dropout_seeds = j.value("dropout_seeds", c.dropout_seeds);
  c.ft_seeds = j.value("ft_seeds", c.ft_seeds);
  c.ft_lr_backbone = j.value("ft_lr_backbone", c.ft_lr_backbone);
  c.ft_patience = j.value("ft_patience", c.ft_patience);
  c.backbone = j.value("backbone", c.backbone);
  if (j.contains("tasks")) c.tasks = j["tasks"].get<std::vector<std::string>>();
  if (j.contains("probe")) {
    const auto& p = j["probe"];
    c.probe.alpha = p.value("alpha", c.probe.alpha);
    c.probe.gamma = p.value("gamma", c.probe.gamma);
    c.probe.lr = p.value("lr", c.probe.lr);
    c.probe.weight_decay = p.value("weight_decay", c.probe.weight_decay);
    c.probe.epochs = p.value("epochs", c.probe.epochs);
    c.probe.batch_size = p.value("batch_size", c.probe.batch_size);
    c.probe.seed = p.value("seed", c.probe.seed);
  }
  c.probe.validate();
  return c;
}

namespace {

struct ResolvedCheckpoint {
  std::string label;       // subdirectory name for outputs
  std::string weights;     // checkpoint directory with manifest.json
  std::string run_dir;     // empty unless the arg was a run directory
  ModelConfig mcfg;
};

ResolvedCheckpoint resolve_checkpoint(const std::string& arg, const std::string& backbone,
                                      const std::string& model_config_path) {
  ResolvedCheckpoint r;
  const fs::path p(arg);
  if (fs::exists(p / "ckpt-final")) {
    r.run_dir = arg;
    r.weights = (p / (backbone == "student" ? "ckpt-final-student" : "ckpt-final")).string();
    PF_CHECK(fs::exists(p / "model.json"), "eval: run directory ", arg, " lacks model.json");
    r.mcfg = load_model_config((p / "model.json").string());
  } else {
    PF_CHECK(fs::exists(p / "manifest.json"), "eval: ", arg,
             " is neither a run directory nor a checkpoint directory");
    r.weights = arg;
    PF_CHECK(!model_config_path.empty(), "eval: --model is required for bare checkpoint ", arg);
    r.mcfg = load_model_config(model_config_path);
  }
  std::string label = p.filename().string();
  if (label.empty()) label = p.parent_path().filename().string();
  r.label = label;
  return r;
}

std::vector<std::pair<int64_t, std::string>> checkpoint_series(const std::string& run_dir,
                                                               const std::string& backbone) {
  std::vector<std::pair<int64_t, std::string>> out;
  const std::string suffix = backbone == "student" ? "" : "-teacher";
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("ckpt-", 0) != 0) continue;
    const std::string rest = name.substr(5);
    // match ckpt-<8 digits>[-teacher]
    const bool teacher = rest.size() > 8 && rest.substr(8) == "-teacher";
    const bool student = rest.size() == 8;
    if (rest.size() < 8 || !std::all_of(rest.begin(), rest.begin() + 8, ::isdigit)) continue;
    if ((backbone == "student" && !student) || (backbone != "student" && !teacher)) continue;
    out.emplace_back(std::stoll(rest.substr(0, 8)), entry.path().string());
  }
  std::sort(out.begin(), out.end());
  (void)suffix;
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream f(path);
  PF_CHECK(f.good(), "eval: cannot write ", path);
  f << "task,protocol,auroc,balacc,probe_seed,dropout_seed\n";
  for (const auto& r : rows) {
    char line[256];
    std::snprintf(line, sizeof(line), "%s,%s,%.10g,%.10g,%llu,%llu", r.task.c_str(),
                  r.protocol.c_str(), r.auroc, r.balacc,
                  static_cast<unsigned long long>(r.probe_seed),
                  static_cast<unsigned long long>(r.dropout_seed));
    f << line << "\n";
  }
}

std::vector<std::string> cohort_tasks(const std::vector<ParticipantRecord>& recs) {
  std::set<std::string> names;
  for (const auto& r : recs)
    for (const auto& [k, v] : r.labels) names.insert(k);
  return {names.begin(), names.end()};
}

std::vector<MetricsRow> finetune_battery(const ResolvedCheckpoint& ckpt, const LoadedData& data,
                                         const EvalConfig& cfg,
                                         const std::vector<std::string>& tasks,
                                         const EvalProtocols& protocols) {
  std::vector<MetricsRow> rows;
  const auto complete = [&] {
    std::vector<ParticipantRecord> out;
    for (const auto& r : data.test)
      if (r.complete()) out.push_back(r);
    return out;
  }();

  for (const std::string& task : tasks) {
    std::vector<int> train_y, val_y, test_y, complete_y;
    for (const auto& r : data.train) train_y.push_back(r.labels.at(task));
    for (const auto& r : data.val) val_y.push_back(r.labels.at(task));
    for (const auto& r : data.test) test_y.push_back(r.labels.at(task));
    for (const auto& r : complete) complete_y.push_back(r.labels.at(task));

    for (int s = 0; s < cfg.ft_seeds; ++s) {
      FinetuneConfig fcfg;
      fcfg.probe = cfg.probe;
      fcfg.probe.seed = cfg.probe.seed + static_cast<uint64_t>(s);
      fcfg.lr_backbone = cfg.ft_lr_backbone;
      fcfg.patience = cfg.ft_patience;
      // fresh weights per seed: fine-tuning mutates the backbone
      PanModel tuned = load_model(data.schema, ckpt.mcfg, ckpt.weights);
      auto result = finetune(tuned, data.train, train_y, data.val, val_y, fcfg);

      auto emit = [&](const std::string& label, const std::vector<ParticipantRecord>& subset,
                      const std::vector<int>& y, const DropoutSpec& spec, uint64_t ds) {
        const auto emb = embed_cohort(tuned, subset, spec);
        const auto scores = result.head.scores(emb);
        rows.push_back({task, "ft_" + label, auroc(scores, y), balanced_accuracy(scores, y),
                        fcfg.probe.seed, ds});
      };
      if (protocols.standard) emit("standard", data.test, test_y, DropoutSpec::none(), 0);
      if (!complete.empty()) {
        if (protocols.full) emit("full", complete, complete_y, DropoutSpec::none(), 0);
        for (int k : protocols.drop_k)
          for (int ds = 0; ds < protocols.dropout_seeds; ++ds)
            emit("drop" + std::to_string(k), complete, complete_y, DropoutSpec::random_k(k, ds),
                 static_cast<uint64_t>(ds));
      }
    }
  }
  return rows;
}

}  // namespace

int cmd_eval(const EvalArgs& args) {
  RunManifest manifest;
  manifest.command = "eval";
  manifest.stamp_start();
  PF_CHECK(!args.checkpoints.empty(), "eval: at least one --checkpoint required");

  EvalConfig cfg;
  if (!args.config_path.empty()) {
    cfg = load_eval_config(args.config_path);
    manifest.add_input(args.config_path);
  }
  std::vector<std::string> protocol_tokens = cfg.protocols;
  if (args.protocols) {
    protocol_tokens.clear();
    std::string tok;
    for (char c : *args.protocols + ",") {
      if (c == ',') {
        if (!tok.empty()) protocol_tokens.push_back(tok);
        tok.clear();
      } else {
        tok += c;
      }
    }
  }

  LoadedData data = load_data_dir(args.data_dir);
  for (const char* name : {"schema.json", "cohort.jsonl", "norm_stats.json", "splits.json"})
    manifest.add_input((fs::path(args.data_dir) / name).string());

  EvalProtocols protocols;
  protocols.standard = protocols.full = protocols.specific = false;
  protocols.probe_seeds = cfg.probe_seeds;
  protocols.dropout_seeds = cfg.dropout_seeds;
  bool want_pairwise = false, want_importance = false, want_trajectory = false, want_ft = false;
  bool any_lp = false;
  for (const std::string& t : protocol_tokens) {
    if (t == "standard") {
      protocols.standard = true;
      any_lp = true;
    } else if (t == "full") {
      protocols.full = true;
      any_lp = true;
    } else if (t.rfind("drop", 0) == 0) {
      protocols.drop_k.push_back(std::stoi(t.substr(4)));
      any_lp = true;
    } else if (t == "specific") {
      protocols.specific = true;
      any_lp = true;
    } else if (t == "pairwise") {
      want_pairwise = true;
    } else if (t == "importance") {
      want_importance = true;
    } else if (t == "trajectory") {
      want_trajectory = true;
    } else if (t == "ft") {
      want_ft = true;
    } else {
      fail(msg("eval: unknown protocol token '", t, "'"));
    }
  }

  std::vector<std::string> tasks = cfg.tasks.empty() ? cohort_tasks(data.test) : cfg.tasks;
  PF_CHECK(!tasks.empty(), "eval: no tasks found");

  fs::create_directories(args.out_dir);
  for (const std::string& arg : args.checkpoints) {
    ResolvedCheckpoint ckpt = resolve_checkpoint(arg, cfg.backbone, args.model_config_path);
    manifest.add_input((fs::path(ckpt.weights) / "params.bin").string());
    PanModel model = load_model(data.schema, ckpt.mcfg, ckpt.weights);

    const fs::path out = fs::path(args.out_dir) / ckpt.label;
    fs::create_directories(out);

    std::vector<MetricsRow> rows;
    if (any_lp)
      rows = organ_dropout_eval(model, data.schema, data.train, data.test, tasks, cfg.probe,
                                protocols);
    if (want_ft) {
      auto ft_rows = finetune_battery(ckpt, data, cfg, tasks, protocols);
      rows.insert(rows.end(), ft_rows.begin(), ft_rows.end());
    }
    if (any_lp || want_ft) {
      write_metrics_csv((out / "metrics.csv").string(), rows);
      manifest.outputs.push_back((out / "metrics.csv").string());
    }

    if (want_pairwise) {
      auto heat = pairwise_dropout_heatmap(model, data.schema, data.train, data.test, tasks,
                                           cfg.probe, cfg.probe_seeds);
      std::ofstream f(out / "heatmap.csv");
      f << "row_organ,col_organ,value\n";
      const int O = data.schema.organ_count();
      for (int i = 0; i < O; ++i)
        for (int j = 0; j <= i; ++j) {
          char line[128];
          std::snprintf(line, sizeof(line), "%s,%s,%.10g",
                        data.schema.organs()[i].name.c_str(),
                        data.schema.organs()[j].name.c_str(), heat[i * O + j]);
          f << line << "\n";
        }
      manifest.outputs.push_back((out / "heatmap.csv").string());
    }

    if (want_importance) {
      auto imp = leave_one_out_importance(model, data.schema, data.train, data.test, tasks,
                                          cfg.probe, cfg.probe_seeds);
      std::ofstream f(out / "importance.csv");
      f << "organ,task,delta_auroc_x100\n";
      for (const auto& r : imp) {
        char line[160];
        std::snprintf(line, sizeof(line), "%s,%s,%.10g", r.organ.c_str(), r.task.c_str(),
                      r.delta_auroc_x100);
        f << line << "\n";
      }
      manifest.outputs.push_back((out / "importance.csv").string());
    }

    if (want_trajectory) {
      PF_CHECK(!ckpt.run_dir.empty(), "eval: trajectory needs a run directory, got ", arg);
      auto series = checkpoint_series(ckpt.run_dir, cfg.backbone);
      PF_CHECK(!series.empty(), "eval: no checkpoint series in ", ckpt.run_dir);
      std::vector<ParticipantRecord> sample;
      for (const auto& r : data.test)
        if (r.complete()) sample.push_back(r);
      if (sample.size() > 256) sample.resize(256);
      PF_CHECK(!sample.empty(), "eval: trajectory needs complete-organ participants");
      auto rows_t = saliency_trajectory(series, data.schema, ckpt.mcfg, sample,
                                        SaliencyProxy::AllLayerAverage);
      std::ofstream f(out / "trajectory.csv");
      f << "step,organ,share\n";
      for (const auto& r : rows_t) {
        char line[128];
        std::snprintf(line, sizeof(line), "%lld,%s,%.10g", static_cast<long long>(r.step),
                      r.organ.c_str(), r.share);
        f << line << "\n";
      }
      manifest.outputs.push_back((out / "trajectory.csv").string());
    }
  }

  manifest.seed = cfg.probe.seed;
  manifest.config = {{"protocols", protocol_tokens}, {"probe_seeds", cfg.probe_seeds},
                     {"dropout_seeds", cfg.dropout_seeds}, {"backbone", cfg.backbone},
                     {"tasks", tasks}};
  manifest.stamp_end();
  manifest.write(args.out_dir);
  return outputs_exist(manifest.outputs) ? 0 : 1;
}

int cmd_bench_overhead(const BenchArgs& args) {
  PF_CHECK(args.iters >= 1, "bench-overhead: --iters must be >= 1");
  PF_CHECK(args.warmup >= 0, "bench-overhead: --warmup must be >= 0");
  RunManifest manifest;
  manifest.command = "bench-overhead";
  manifest.stamp_start();

  LoadedData data = load_data_dir(args.data_dir);
  ResolvedCheckpoint ckpt =
      resolve_checkpoint(args.checkpoint, "student", args.model_config_path);
  manifest.add_input((fs::path(ckpt.weights) / "params.bin").string());
  PanModel model = load_model(data.schema, ckpt.mcfg, ckpt.weights);

  PretrainConfig cfg;
  if (!args.pretrain_config_path.empty()) cfg = load_pretrain_config(args.pretrain_config_path);
  cfg.batch_size = args.batch_size;
  cfg.epochs = 1;

  auto rep = bench_overhead(data.schema, ckpt.mcfg, cfg, data.pretrain, model.params(),
                            parse_strategy(args.strategy_a), parse_strategy(args.strategy_b),
                            args.iters, args.warmup);

  std::printf("%s: %.4f +- %.4f ms/iter\n", args.strategy_a.c_str(), rep.mean_a_ms,
              rep.std_a_ms);
  std::printf("%s: %.4f +- %.4f ms/iter\n", args.strategy_b.c_str(), rep.mean_b_ms,
              rep.std_b_ms);
  std::printf("delta: %+.2f%%\n", rep.delta_percent);

  fs::create_directories(args.out_dir);
  {
    json j{{"strategy_a", args.strategy_a}, {"mean_a_ms", rep.mean_a_ms},
           {"std_a_ms", rep.std_a_ms},      {"strategy_b", args.strategy_b},
           {"mean_b_ms", rep.mean_b_ms},    {"std_b_ms", rep.std_b_ms},
           {"delta_percent", rep.delta_percent}, {"iters", args.iters},
           {"warmup", args.warmup}};
    std::ofstream f(fs::path(args.out_dir) / "overhead.json");
    f << j.dump(2) << "\n";
  }
  manifest.outputs.push_back((fs::path(args.out_dir) / "overhead.json").string());
  manifest.config = {{"iters", args.iters}, {"warmup", args.warmup},
                     {"batch_size", args.batch_size}};
  manifest.stamp_end();
  manifest.write(args.out_dir);
  return outputs_exist(manifest.outputs) ? 0 : 1;
}

}  // namespace panfm
