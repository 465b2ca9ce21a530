#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "panfm/eval.hpp"
#include "panfm/trainer.hpp"

namespace panfm {

// Command implementations shared by the CLI binary and tests. Each command
// writes its declared outputs plus a RunManifest; returns 0 on success.

struct GenDataArgs {
  std::string schema_path;
  std::string gen_config_path;
  std::string out_dir;
  std::optional<uint64_t> seed;  // overrides the config seed
};
int cmd_gen_data(const GenDataArgs& args);

struct PretrainArgs {
  std::string config_path;            // pretrain.json; empty = desk defaults
  std::string model_config_path;      // model.json; empty = desk defaults
  std::string data_dir;               // cmd_gen_data output
  std::string out_dir;
  std::optional<std::string> strategy;   // sgm | random
  std::optional<std::string> objective;  // dino | ntxent | vicreg | barlow
  std::optional<std::string> proxy;      // a1 | a2 | a3
  std::optional<uint64_t> seed;
};
int cmd_pretrain(const PretrainArgs& args);

struct EvalConfig {
  std::vector<std::string> protocols = {"standard", "full", "drop1", "drop2", "drop3",
                                        "specific"};
  int probe_seeds = 10;
  int dropout_seeds = 5;
  int ft_seeds = 5;
  ProbeConfig probe;
  double ft_lr_backbone = 1e-4;
  int ft_patience = 3;
  std::string backbone = "teacher";  // which network embeds: teacher | student
  std::vector<std::string> tasks;    // empty = every task in the cohort
};
EvalConfig load_eval_config(const std::string& path);

struct EvalArgs {
  std::vector<std::string> checkpoints;  // run dirs (with ckpt-final) or checkpoint dirs
  std::string data_dir;
  std::string out_dir;
  std::string config_path;                       // eval.json; empty = defaults
  std::optional<std::string> protocols;          // comma list, overrides config
  std::string model_config_path;                 // needed for bare checkpoint dirs
};
int cmd_eval(const EvalArgs& args);

struct BenchArgs {
  std::string checkpoint;  // run dir or checkpoint dir
  std::string data_dir;
  std::string out_dir;
  int iters = 1000;
  int warmup = 50;
  int batch_size = 16;
  std::string strategy_a = "sgm";
  std::string strategy_b = "random";
  std::string model_config_path;
  std::string pretrain_config_path;
};
int cmd_bench_overhead(const BenchArgs& args);

// Data-directory loading shared by pretrain/eval/bench.
struct LoadedData {
  OrganSchema schema;
  NormStats stats;
  std::vector<ParticipantRecord> pretrain, train, val, test;  // normalized
};
LoadedData load_data_dir(const std::string& data_dir);

}  // namespace panfm
