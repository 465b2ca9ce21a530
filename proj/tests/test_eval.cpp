#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "panfm/checkpoint.hpp"
#include "panfm/eval.hpp"
#include "panfm/metrics.hpp"
#include "panfm/trainer.hpp"

using namespace panfm;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.proto_dim = 16;
  cfg.head_hidden = 16;
  return cfg;
}

CohortGenConfig eval_gen(int participants, uint64_t seed) {
  CohortGenConfig cfg;
  cfg.participants = participants;
  cfg.latent_dim = 4;
  cfg.signal_scale = 1.0;
  cfg.noise_scale = 0.5;
  cfg.dominant_organ = "Adipose";
  cfg.dominance_multiplier = 3.0;
  const auto schema = desk_schema();
  for (const auto& o : schema.organs()) cfg.availability[o.name] = 1.0;
  cfg.organ_signal_scale = {{"Spleen", 0.0}};  // planted pure-noise organ
  cfg.tasks = {{"global", {4.0, 0.0, 0.0, 0.0}, 0.0}};
  cfg.seed = seed;
  return cfg;
}

struct EvalFixture {
  OrganSchema schema = desk_schema();
  std::vector<ParticipantRecord> train, test;
  PanModel model;

  explicit EvalFixture(uint64_t seed, int n = 600)
      : model(desk_schema(), small_model(), seed) {
    auto recs = generate_cohort(eval_gen(n, seed), schema);
    auto stats = compute_norm_stats(recs, schema);
    auto normed = normalize_all(recs, stats);
    auto splits = split_cohort(normed, {0.0, 0.7, 0.0, 0.3}, seed);
    train = std::move(splits.train);
    test = std::move(splits.test);
  }
};

ProbeConfig quick_probe(uint64_t seed = 0) {
  ProbeConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 128;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("embed: dropout none equals the full-organ protocol embedding") {
  EvalFixture f(50, 120);
  auto a = embed_cohort(f.model, f.test, DropoutSpec::none());
  auto b = embed_cohort(f.model, f.test, DropoutSpec::random_k(0, 3));
  CHECK(a == b);
}

TEST_CASE("embed: dropped organ is bit-level invisible") {
  EvalFixture f(51, 60);
  const int adipose = f.schema.index_of("Adipose");
  auto before = embed_cohort(f.model, f.test, DropoutSpec::specific({adipose}));
  auto perturbed = f.test;
  for (auto& r : perturbed)
    if (r.organs[adipose]) (*r.organs[adipose])[0] += 500.0;
  auto after = embed_cohort(f.model, perturbed, DropoutSpec::specific({adipose}));
  CHECK(before == after);

  // and equals physically deleting the organ
  auto deleted = f.test;
  for (auto& r : deleted) r.organs[adipose].reset();
  auto gone = embed_cohort(f.model, deleted, DropoutSpec::none());
  CHECK(before == gone);
}

TEST_CASE("random dropout draws are shared across checkpoints and reject last-organ kills") {
  EvalFixture f1(52, 40);
  EvalFixture f2(53, 40);  // different weights, same records not required
  auto spec = DropoutSpec::random_k(2, 99);
  for (const auto& r : f1.test) {
    auto a = dropped_organs(spec, r);
    auto b = dropped_organs(spec, r);  // stream keyed by (seed, id): repeatable
    CHECK(a == b);
    CHECK(a.size() == 2);
  }
  // same seed, same ids -> same dropped sets regardless of the model
  auto e1 = embed_cohort(f1.model, f1.test, spec);
  (void)e1;

  ParticipantRecord lone;
  lone.id = 7;
  lone.organs.resize(f1.schema.organ_count());
  lone.organs[2] = std::vector<double>(f1.schema.organs()[2].feature_dim, 0.0);
  CHECK_THROWS(dropped_organs(DropoutSpec::random_k(1, 0), lone));
  CHECK_THROWS(dropped_organs(DropoutSpec::specific({2}), lone));
}

TEST_CASE("linear probe: separable clusters, permutation null, determinism") {
  RngStream rng(54);
  const int n = 400, d = 8;
  std::vector<double> emb(n * d);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[i] = i % 2;
    for (int c = 0; c < d; ++c)
      emb[i * d + c] = rng.normal() * 0.3 + (labels[i] ? 1.0 : -1.0) * (c == 0 ? 1.5 : 0.2);
  }
  auto probe = train_linear_probe(emb, d, labels, quick_probe(1));
  CHECK(auroc(probe.scores(emb), labels) >= 0.95);

  // permutation null over 10 seeds
  std::vector<int> shuffled = labels;
  RngStream perm(55);
  perm.shuffle(shuffled);
  double mean_auc = 0.0;
  for (uint64_t s = 0; s < 10; ++s) {
    auto p = train_linear_probe(emb, d, shuffled, quick_probe(s));
    mean_auc += auroc(p.scores(emb), shuffled) / 10.0;
  }
  CHECK(std::abs(mean_auc - 0.5) < 0.1);

  auto p1 = train_linear_probe(emb, d, labels, quick_probe(3));
  auto p2 = train_linear_probe(emb, d, labels, quick_probe(3));
  CHECK(p1.w == p2.w);
  CHECK(p1.b == p2.b);

  CHECK_THROWS(train_linear_probe(emb, d, std::vector<int>(n, 1), quick_probe(0)));
}

TEST_CASE("finetune with lr_backbone 0 reduces exactly to linear probing") {
  EvalFixture f(56, 160);
  auto labels = [&](const std::vector<ParticipantRecord>& rs) {
    std::vector<int> y;
    for (const auto& r : rs) y.push_back(r.labels.at("global"));
    return y;
  };
  FinetuneConfig cfg;
  cfg.probe = quick_probe(11);
  cfg.probe.epochs = 4;
  cfg.lr_backbone = 0.0;
  cfg.patience = 1000;  // disable early stopping for the equality check

  auto before = embed_cohort(f.model, f.train, DropoutSpec::none());
  auto ft = finetune(f.model, f.train, labels(f.train), f.test, labels(f.test), cfg);
  auto after = embed_cohort(f.model, f.train, DropoutSpec::none());
  CHECK(before == after);  // backbone untouched bit-exactly

  ProbeConfig pc = cfg.probe;
  auto probe = train_linear_probe(before, f.model.config().d, labels(f.train), pc);
  REQUIRE(probe.w.size() == ft.head.w.size());
  for (size_t i = 0; i < probe.w.size(); ++i) CHECK(probe.w[i] == ft.head.w[i]);
  CHECK(probe.b == ft.head.b);
}

TEST_CASE("finetune tracks or beats the frozen probe over 5 seeds") {
  double probe_mean = 0.0, ft_mean = 0.0;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    EvalFixture f(60 + seed, 240);
    auto labels = [&](const std::vector<ParticipantRecord>& rs) {
      std::vector<int> y;
      for (const auto& r : rs) y.push_back(r.labels.at("global"));
      return y;
    };
    auto train_y = labels(f.train);
    auto test_y = labels(f.test);

    auto emb_train = embed_cohort(f.model, f.train, DropoutSpec::none());
    auto probe = train_linear_probe(emb_train, f.model.config().d, train_y, quick_probe(seed));
    auto emb_test = embed_cohort(f.model, f.test, DropoutSpec::none());
    probe_mean += auroc(probe.scores(emb_test), test_y) / 5.0;

    FinetuneConfig cfg;
    cfg.probe = quick_probe(seed);
    cfg.probe.epochs = 6;
    cfg.lr_backbone = 1e-4;
    cfg.patience = 3;
    auto ft = finetune(f.model, f.train, train_y, f.test, test_y, cfg);
    auto emb_ft = embed_cohort(f.model, f.test, DropoutSpec::none());
    ft_mean += auroc(ft.head.scores(emb_ft), test_y) / 5.0;
  }
  CHECK(ft_mean >= probe_mean - 0.02);
}

TEST_CASE("finetune early stopping halts after patience without improvement") {
  EvalFixture f(70, 120);
  auto labels = [&](const std::vector<ParticipantRecord>& rs) {
    std::vector<int> y;
    for (const auto& r : rs) y.push_back(r.labels.at("global"));
    return y;
  };
  FinetuneConfig cfg;
  cfg.probe = quick_probe(2);
  cfg.probe.epochs = 50;
  cfg.probe.lr = 0.1;  // aggressive lr so validation stops improving quickly
  cfg.lr_backbone = 0.0;
  cfg.patience = 2;
  auto ft = finetune(f.model, f.train, labels(f.train), f.test, labels(f.test), cfg);
  CHECK(ft.best_epoch < 49);  // stopped early, best epoch well before the budget
}

TEST_CASE("organ dropout protocol grid") {
  EvalFixture f(57, 400);
  EvalProtocols protocols;
  protocols.drop_k = {0, 1, 2};
  protocols.probe_seeds = 2;
  protocols.dropout_seeds = 2;
  auto rows = organ_dropout_eval(f.model, f.schema, f.train, f.test, {"global"}, quick_probe(5),
                                 protocols);

  // expected cells: standard 2 + full 2 + drop{0,1,2} x 2 dropout x 2 probes
  // + 7 specific x 2 probes
  CHECK(rows.size() == 2 + 2 + 3 * 2 * 2 + 7 * 2);

  auto cell = [&](const std::string& label, uint64_t probe_seed,
                  uint64_t dropout_seed) -> const MetricsRow& {
    for (const auto& r : rows)
      if (r.protocol == label && r.probe_seed == probe_seed && r.dropout_seed == dropout_seed)
        return r;
    REQUIRE(false);
    return rows[0];
  };
  // drop-0 equals the full cell exactly
  for (uint64_t ps : {5ull, 6ull})
    for (uint64_t ds : {0ull, 1ull}) {
      CHECK(cell("drop0", ps, ds).auroc == cell("full", ps, 0).auroc);
      CHECK(cell("drop0", ps, ds).balacc == cell("full", ps, 0).balacc);
    }
  for (const auto& r : rows) {
    CHECK(r.auroc >= 0.0);
    CHECK(r.auroc <= 1.0);
    CHECK(r.balacc >= 0.0);
    CHECK(r.balacc <= 1.0);
  }

  EvalProtocols bad;
  bad.drop_k = {7};
  CHECK_THROWS(
      organ_dropout_eval(f.model, f.schema, f.train, f.test, {"global"}, quick_probe(5), bad));
}

TEST_CASE("exhaustive drop-1 equals the mean of the specific w/o-X cells") {
  EvalFixture f(58, 300);
  EvalProtocols protocols;
  protocols.standard = false;
  protocols.full = false;
  protocols.probe_seeds = 1;
  protocols.dropout_seeds = 1;
  auto rows = organ_dropout_eval(f.model, f.schema, f.train, f.test, {"global"}, quick_probe(9),
                                 protocols);
  double wo_mean = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.protocol.rfind("wo_", 0) == 0) {
      wo_mean += r.auroc;
      ++n;
    }
  REQUIRE(n == 7);
  wo_mean /= n;

  // exhaustive drop-1: every organ pattern applied to all participants
  double exhaustive = 0.0;
  auto trained_emb = embed_cohort(f.model, f.train, DropoutSpec::none());
  std::vector<int> train_y, test_y;
  for (const auto& r : f.train) train_y.push_back(r.labels.at("global"));
  for (const auto& r : f.test) test_y.push_back(r.labels.at("global"));
  auto probe = train_linear_probe(trained_emb, f.model.config().d, train_y, quick_probe(9));
  for (int o = 0; o < 7; ++o) {
    auto emb = embed_cohort(f.model, f.test, DropoutSpec::specific({o}));
    exhaustive += auroc(probe.scores(emb), test_y) / 7.0;
  }
  CHECK(std::abs(exhaustive - wo_mean) < 1e-12);
}

TEST_CASE("pairwise heatmap has 28 populated cells; diagonal matches single removal") {
  EvalFixture f(59, 300);
  auto heat = pairwise_dropout_heatmap(f.model, f.schema, f.train, f.test, {"global"},
                                       quick_probe(4), 2);
  int populated = 0;
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j)
      if (!std::isnan(heat[i * 7 + j])) {
        ++populated;
        CHECK(j <= i);
      }
  CHECK(populated == 28);

  // removing the planted pure-noise organ changes the metric by < 0.02
  const int spleen = f.schema.index_of("Spleen");
  EvalProtocols protocols;
  protocols.standard = false;
  protocols.specific = false;
  protocols.probe_seeds = 2;
  auto rows = organ_dropout_eval(f.model, f.schema, f.train, f.test, {"global"}, quick_probe(4),
                                 protocols);
  double full_mean = 0.0;
  for (const auto& r : rows) full_mean += r.auroc / rows.size();
  CHECK(std::abs(heat[spleen * 7 + spleen] - full_mean) < 0.02);
}

TEST_CASE("leave-one-out importance: null organ near zero, dominant organ largest") {
  EvalFixture f(61, 500);
  auto rows = leave_one_out_importance(f.model, f.schema, f.train, f.test, {"global"},
                                       quick_probe(8), 10);
  REQUIRE(rows.size() == 7);
  double null_delta = 0.0, dominant_delta = 0.0, best_other = -1e9;
  for (const auto& r : rows) {
    if (r.organ == "Spleen") null_delta = r.delta_auroc_x100;
    if (r.organ == "Adipose")
      dominant_delta = r.delta_auroc_x100;
    else
      best_other = std::max(best_other, r.delta_auroc_x100);
  }
  CHECK(std::abs(null_delta) < 2.0);
  CHECK(dominant_delta > 0.0);
  CHECK(dominant_delta > best_other);
}

TEST_CASE("importance omits organs never available in the evaluated records") {
  EvalFixture f(62, 300);
  const int liver = f.schema.index_of("Liver");
  auto test = f.test;
  for (auto& r : test) r.organs[liver].reset();
  auto rows = leave_one_out_importance(f.model, f.schema, f.train, test, {"global"},
                                       quick_probe(2), 2);
  for (const auto& r : rows) CHECK(r.organ != "Liver");
  CHECK(rows.size() == 6);
}

TEST_CASE("saliency trajectory: init shares near token prior, purity, schema drift") {
  auto schema = desk_schema();
  auto recs = generate_cohort(eval_gen(64, 63), schema);
  auto stats = compute_norm_stats(recs, schema);
  auto sample = normalize_all(recs, stats);

  const auto dir = fs::temp_directory_path() / "panfm_traj_ckpt";
  fs::remove_all(dir);
  PanModel fresh(schema, small_model(), 64);
  save_checkpoint(fresh.params(), dir.string());

  auto rows = saliency_trajectory({{0, dir.string()}, {0, dir.string()}}, schema, small_model(),
                                  sample, SaliencyProxy::AllLayerAverage);
  REQUIRE(rows.size() == 16);  // (7 organs + cls_self) x 2 checkpoints

  const int N = schema.total_tokens();
  double sum = 0.0;
  for (size_t i = 0; i < 8; ++i) {
    const auto& r = rows[i];
    sum += r.share;
    if (r.organ != "cls_self") {
      const int o = schema.index_of(r.organ);
      const double prior = static_cast<double>(schema.organs()[o].token_count) / (N + 1);
      CHECK(std::abs(r.share - prior) < 0.05);
    }
  }
  CHECK(std::abs(sum - 1.0) < 1e-6);
  // identical checkpoint listed twice gives identical rows
  for (size_t i = 0; i < 8; ++i) CHECK(rows[i].share == rows[i + 8].share);

  // schema drift: checkpoint saved under a different schema errors out
  OrganSchema other({{"X", 2, 1}, {"Y", 2, 1}});
  CHECK_THROWS(saliency_trajectory({{0, dir.string()}}, other, small_model(), sample,
                                   SaliencyProxy::AllLayerAverage));
  fs::remove_all(dir);
}
