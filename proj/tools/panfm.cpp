// panfm - multi-organ self-supervised pre-training with saliency-guided
// masking: synthetic cohort generation, pre-training, robustness
// evaluation and the masking-overhead benchmark.

#include <cstdio>
#include <exception>

#include <CLI11.hpp>

#include "panfm/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"panfm: multi-organ self-supervised learning with saliency-guided masking"};
  app.require_subcommand(1);

  panfm::GenDataArgs gen;
  uint64_t gen_seed = 0;
  bool gen_has_seed = false;
  auto* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic cohort with splits");
  cmd_gen->add_option("--schema", gen.schema_path, "schema.json")->required();
  cmd_gen->add_option("--gen-config", gen.gen_config_path, "generator config json")->required();
  cmd_gen->add_option("--out", gen.out_dir, "output directory")->required();
  cmd_gen->add_option("--seed", gen_seed, "override the config seed")
      ->each([&](const std::string&) { gen_has_seed = true; });

  panfm::PretrainArgs pre;
  uint64_t pre_seed = 0;
  bool pre_has_seed = false;
  std::string pre_strategy, pre_objective, pre_proxy;
  auto* cmd_pre = app.add_subcommand("pretrain", "teacher-student pre-training");
  cmd_pre->add_option("--config", pre.config_path, "pretrain.json (defaults if omitted)");
  cmd_pre->add_option("--model", pre.model_config_path, "model.json (desk defaults if omitted)");
  cmd_pre->add_option("--data", pre.data_dir, "gen-data output directory")->required();
  cmd_pre->add_option("--out", pre.out_dir, "output directory")->required();
  cmd_pre->add_option("--strategy", pre_strategy, "sgm|random");
  cmd_pre->add_option("--objective", pre_objective, "dino|ntxent|vicreg|barlow");
  cmd_pre->add_option("--proxy", pre_proxy, "a1|a2|a3");
  cmd_pre->add_option("--seed", pre_seed, "override the config seed")
      ->each([&](const std::string&) { pre_has_seed = true; });

  panfm::EvalArgs ev;
  std::string ev_protocols;
  auto* cmd_ev = app.add_subcommand("eval", "downstream probing and robustness protocols");
  cmd_ev->add_option("--checkpoint", ev.checkpoints, "run directory or checkpoint directory")
      ->required()
      ->take_all();
  cmd_ev->add_option("--data", ev.data_dir, "gen-data output directory")->required();
  cmd_ev->add_option("--out", ev.out_dir, "output directory")->required();
  cmd_ev->add_option("--config", ev.config_path, "eval.json (defaults if omitted)");
  cmd_ev->add_option("--protocols", ev_protocols,
                     "comma list: standard,full,dropK,specific,pairwise,importance,trajectory,ft");
  cmd_ev->add_option("--model", ev.model_config_path, "model.json for bare checkpoint dirs");

  panfm::BenchArgs bench;
  auto* cmd_bench = app.add_subcommand("bench-overhead", "SGM vs random per-iteration wall clock");
  cmd_bench->add_option("--checkpoint", bench.checkpoint, "run or checkpoint directory")
      ->required();
  cmd_bench->add_option("--data", bench.data_dir, "gen-data output directory")->required();
  cmd_bench->add_option("--out", bench.out_dir, "output directory")->required();
  cmd_bench->add_option("--iters", bench.iters, "timed iterations (default 1000)");
  cmd_bench->add_option("--warmup", bench.warmup, "warmup iterations (default 50)");
  cmd_bench->add_option("--batch", bench.batch_size, "batch size (default 16)");
  cmd_bench->add_option("--strategy-a", bench.strategy_a, "first strategy (default sgm)");
  cmd_bench->add_option("--strategy-b", bench.strategy_b, "second strategy (default random)");
  cmd_bench->add_option("--model", bench.model_config_path, "model.json for bare checkpoints");
  cmd_bench->add_option("--pretrain-config", bench.pretrain_config_path,
                        "pretrain.json for the timed loop");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_gen->parsed()) {
      if (gen_has_seed) gen.seed = gen_seed;
      return panfm::cmd_gen_data(gen);
    }
    if (cmd_pre->parsed()) {
      if (pre_has_seed) pre.seed = pre_seed;
      if (!pre_strategy.empty()) pre.strategy = pre_strategy;
      if (!pre_objective.empty()) pre.objective = pre_objective;
      if (!pre_proxy.empty()) pre.proxy = pre_proxy;
      return panfm::cmd_pretrain(pre);
    }
    if (cmd_ev->parsed()) {
      if (!ev_protocols.empty()) ev.protocols = ev_protocols;
      return panfm::cmd_eval(ev);
    }
    if (cmd_bench->parsed()) return panfm::cmd_bench_overhead(bench);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
