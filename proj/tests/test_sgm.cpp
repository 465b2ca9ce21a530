#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "panfm/model.hpp"
#include "panfm/rng.hpp"
#include "panfm/schema.hpp"
#include "panfm/sgm.hpp"

using namespace panfm;

namespace {

AttentionCapture uniform_capture(int layers, int heads, int seq) {
  AttentionCapture c;
  c.layers = layers;
  c.heads = heads;
  c.seq = seq;
  c.cls_rows.assign(layers, std::vector<std::vector<double>>(
                                heads, std::vector<double>(seq, 1.0 / seq)));
  return c;
}

std::vector<uint8_t> all_available(const OrganSchema& s) {
  return std::vector<uint8_t>(s.organ_count(), 1);
}

}  // namespace

TEST_CASE("uniform attention gives token-count-proportional saliency") {
  auto schema = desk_schema();
  const int N = schema.total_tokens();
  auto cap = uniform_capture(2, 2, N + 1);
  double cls_self = 0.0;
  auto s = organ_saliency(cap, schema, all_available(schema), SaliencyProxy::AllLayerAverage,
                          &cls_self);
  for (int o = 0; o < schema.organ_count(); ++o) {
    const double want = static_cast<double>(schema.organs()[o].token_count) / (N + 1);
    CHECK(s[o] == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK(cls_self == doctest::Approx(1.0 / (N + 1)));
}

TEST_CASE("one-hot attention concentrates saliency on one organ") {
  auto schema = desk_schema();
  const int N = schema.total_tokens();
  auto cap = uniform_capture(2, 2, N + 1);
  for (auto& layer : cap.cls_rows)
    for (auto& row : layer) {
      std::fill(row.begin(), row.end(), 0.0);
      row[1] = 1.0;  // first brain token (patch 0)
    }
  double cls_self = 0.0;
  auto s = organ_saliency(cap, schema, all_available(schema), SaliencyProxy::AllLayerAverage,
                          &cls_self);
  CHECK(s[schema.index_of("Brain")] == doctest::Approx(1.0));
  for (int o = 1; o < schema.organ_count(); ++o) CHECK(s[o] == doctest::Approx(0.0));
  CHECK(cls_self == doctest::Approx(0.0));
}

TEST_CASE("rollout with identity attention keeps all mass on CLS") {
  auto schema = desk_schema();
  const int S = schema.total_tokens() + 1;
  AttentionCapture cap;
  cap.layers = 1;
  cap.heads = 1;
  cap.seq = S;
  cap.cls_rows.assign(1, std::vector<std::vector<double>>(1, std::vector<double>(S, 0.0)));
  cap.cls_rows[0][0][0] = 1.0;
  cap.has_full = true;
  cap.full.assign(1, std::vector<double>(S * S, 0.0));
  for (int i = 0; i < S; ++i) cap.full[0][i * S + i] = 1.0;
  double cls_self = 0.0;
  auto s = organ_saliency(cap, schema, all_available(schema), SaliencyProxy::Rollout, &cls_self);
  for (int o = 0; o < schema.organ_count(); ++o) CHECK(s[o] == doctest::Approx(0.0));
  CHECK(cls_self == doctest::Approx(1.0));
}

TEST_CASE("rollout without full capture is a capability error") {
  auto schema = desk_schema();
  auto cap = uniform_capture(2, 2, schema.total_tokens() + 1);
  CHECK_THROWS_WITH_AS(
      organ_saliency(cap, schema, all_available(schema), SaliencyProxy::Rollout),
      doctest::Contains("full-matrix"), std::runtime_error);
}

TEST_CASE("saliency plus CLS self mass is a distribution on a real capture (A1/A2)") {
  auto schema = desk_schema();
  ModelConfig cfg;
  cfg.d = 8;
  cfg.layers = 3;
  cfg.heads = 2;
  cfg.proto_dim = 4;
  cfg.head_hidden = 4;
  PanModel m(schema, cfg, 31);
  RngStream rng(32);
  ParticipantRecord rec;
  rec.id = 0;
  rec.organs.resize(schema.organ_count());
  for (int o = 0; o < schema.organ_count(); ++o) {
    std::vector<double> x(schema.organs()[o].feature_dim);
    for (auto& v : x) v = rng.normal();
    rec.organs[o] = std::move(x);
  }
  std::vector<const ParticipantRecord*> batch{&rec};
  auto fwd = m.forward_batch(batch, {}, CaptureMode::Full);
  auto cap = PanModel::slice_capture(fwd.capture, 0);
  for (auto proxy : {SaliencyProxy::LastLayer, SaliencyProxy::AllLayerAverage}) {
    double cls_self = 0.0;
    auto s = organ_saliency(cap, schema, all_available(schema), proxy, &cls_self);
    double total = cls_self;
    for (double v : s) total += v;
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  // rollout rows are also distributions (row-stochastic product)
  double cls_self = 0.0;
  auto s3 = organ_saliency(cap, schema, all_available(schema), SaliencyProxy::Rollout, &cls_self);
  double total = cls_self;
  for (double v : s3) total += v;
  CHECK(std::abs(total - 1.0) < 1e-6);
}

TEST_CASE("masking distribution: symmetry, hand value, exclusion") {
  std::vector<uint8_t> avail{1, 1, 1};
  for (double tau : {0.05, 0.25, 1.0, 100.0}) {
    auto p = masking_distribution({0.5, 0.5, 0.5}, avail, tau);
    for (double v : p) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
  }

  auto p = masking_distribution({0.4, 0.2}, {1, 1}, 0.25);
  CHECK(p[0] == doctest::Approx(0.6900).epsilon(1e-3));
  CHECK(p[1] == doctest::Approx(0.3100).epsilon(1e-3));

  auto q = masking_distribution({0.4, 0.2, 0.9}, {1, 1, 0}, 0.25);
  CHECK(q[2] == 0.0);
  CHECK(q[0] + q[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(q[0] == doctest::Approx(1.0 / (1.0 + std::exp(-0.8))).epsilon(1e-9));

  CHECK_THROWS(masking_distribution({0.1}, {1}, 0.0));
  CHECK_THROWS(masking_distribution({0.1}, {1}, -1.0));
}

TEST_CASE("masking distribution is invariant to constant shifts") {
  RngStream rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(7);
    for (auto& v : s) v = rng.normal();
    std::vector<uint8_t> avail(7, 1);
    for (int o = 0; o < 3; ++o) avail[static_cast<size_t>(rng.uniform_int(7))] = 0;
    avail[0] = 1;
    auto p1 = masking_distribution(s, avail, 0.25);
    for (auto& v : s) v += 123.456;
    auto p2 = masking_distribution(s, avail, 0.25);
    for (size_t i = 0; i < p1.size(); ++i) CHECK(std::abs(p1[i] - p2[i]) < 1e-10);
  }
}

TEST_CASE("temperature limits: uniform at tau=100, argmax at tau=1e-3") {
  RngStream rng(34);
  std::vector<double> s{0.9, 0.1, 0.35, 0.6, 0.2, 0.05, 0.8};  // distinct, |S| <= 1
  std::vector<uint8_t> avail(7, 1);
  auto p_hot = masking_distribution(s, avail, 100.0);
  for (double v : p_hot) CHECK(std::abs(v - 1.0 / 7) <= 1e-3);

  auto p_cold = masking_distribution(s, avail, 1e-3);
  for (int trial = 0; trial < 1000; ++trial) {
    auto m = sample_mask_set(p_cold, 1, rng);
    REQUIRE(m.size() == 1);
    CHECK(m[0] == 0);  // argmax of s
  }
}

TEST_CASE("mask budget formula") {
  RngStream rng(35);
  for (int i = 0; i < 100; ++i) {
    const int n = sample_mask_budget(7, 0.5, rng);
    CHECK(n >= 1);
    CHECK(n <= 3);  // min(floor(3.5), 6) = 3
  }
  for (int i = 0; i < 10; ++i) CHECK(sample_mask_budget(1, 0.5, rng) == 0);
  for (int i = 0; i < 10; ++i) CHECK(sample_mask_budget(2, 0.5, rng) == 1);
  CHECK_THROWS(sample_mask_budget(0, 0.5, rng));
  CHECK_THROWS(sample_mask_budget(3, 0.0, rng));
  CHECK_THROWS(sample_mask_budget(3, 1.0, rng));
}

TEST_CASE("degenerate one-hot distribution always picks that organ") {
  RngStream rng(36);
  for (int i = 0; i < 50; ++i) {
    auto m = sample_mask_set({0.0, 1.0, 0.0}, 1, rng);
    REQUIRE(m.size() == 1);
    CHECK(m[0] == 1);
  }
}

TEST_CASE("uniform P over 4 with n_mask 3: survivor uniform over 100k draws") {
  RngStream rng(37);
  std::vector<int> survivor(4, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    auto m = sample_mask_set({0.25, 0.25, 0.25, 0.25}, 3, rng);
    REQUIRE(m.size() == 3);
    std::set<int> masked(m.begin(), m.end());
    for (int o = 0; o < 4; ++o)
      if (!masked.count(o)) survivor[o]++;
  }
  // exact Plackett-Luce enumeration: symmetric, each organ survives 1/4
  const double want = draws / 4.0;
  const double sigma = std::sqrt(draws * 0.25 * 0.75);
  for (int o = 0; o < 4; ++o) CHECK(std::abs(survivor[o] - want) <= 3.0 * sigma);
}

TEST_CASE("first-draw frequencies match the distribution within 3-sigma") {
  RngStream rng(38);
  std::vector<double> p{0.1, 0.35, 0.05, 0.3, 0.2};
  std::vector<int> counts(5, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    auto m = sample_mask_set(p, 1, rng);
    counts[m[0]]++;
  }
  for (int o = 0; o < 5; ++o) {
    const double want = draws * p[o];
    const double sigma = std::sqrt(draws * p[o] * (1.0 - p[o]));
    CHECK(std::abs(counts[o] - want) <= 3.0 * sigma);
  }
}

TEST_CASE("random baseline: per-organ masking frequency equal within 3-sigma") {
  RngStream rng(39);
  std::vector<uint8_t> avail(7, 1);
  std::vector<int> counts(7, 0);
  const int draws = 100000;
  int64_t total_masked = 0;
  for (int i = 0; i < draws; ++i) {
    auto m = random_mask_set(avail, 0.5, rng);
    CHECK(m.size() >= 1);
    CHECK(m.size() <= 3);
    for (int o : m) counts[o]++;
    total_masked += static_cast<int64_t>(m.size());
  }
  const double p = static_cast<double>(total_masked) / (7.0 * draws);
  for (int o = 0; o < 7; ++o) {
    const double want = draws * p;
    const double sigma = std::sqrt(draws * p * (1.0 - p));
    CHECK(std::abs(counts[o] - want) <= 3.0 * sigma);
  }
}

TEST_CASE("random baseline with singleton availability masks nothing") {
  RngStream rng(40);
  std::vector<uint8_t> avail{0, 0, 1, 0, 0, 0, 0};
  for (int i = 0; i < 20; ++i) CHECK(random_mask_set(avail, 0.5, rng).empty());
}

TEST_CASE("SGM with constant saliency reproduces the uniform baseline draw-for-draw") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    RngStream r1(seed), r2(seed);
    std::vector<uint8_t> avail{1, 0, 1, 1, 1, 0, 1};
    int n_avail = 5;
    for (int i = 0; i < 500; ++i) {
      auto p = masking_distribution(std::vector<double>(7, 0.42), avail, 0.25);
      const int n1 = sample_mask_budget(n_avail, 0.5, r1);
      auto m1 = sample_mask_set(p, n1, r1);
      auto m2 = random_mask_set(avail, 0.5, r2);
      CHECK(m1 == m2);
    }
  }
}

TEST_CASE("exhaustive availability patterns: masks stay inside availability and leave a survivor") {
  auto schema = desk_schema();
  RngStream rng(41);
  for (int pattern = 1; pattern < 128; ++pattern) {
    std::vector<uint8_t> avail(7);
    int n_avail = 0;
    for (int o = 0; o < 7; ++o) {
      avail[o] = (pattern >> o) & 1;
      n_avail += avail[o];
    }
    std::vector<double> s(7);
    for (int o = 0; o < 7; ++o) s[o] = avail[o] ? rng.u01() : 0.0;
    for (double r_mask : {0.3, 0.5, 0.7}) {
      auto p = masking_distribution(s, avail, 0.25);
      // (a) P sums to 1 and is exactly zero off-availability
      double sum = 0.0;
      for (int o = 0; o < 7; ++o) {
        if (!avail[o]) CHECK(p[o] == 0.0);
        sum += p[o];
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
      for (int draw = 0; draw < 1000; ++draw) {
        const int n_mask = sample_mask_budget(n_avail, r_mask, rng);
        auto m = sample_mask_set(p, n_mask, rng);
        int unmasked_avail = n_avail - static_cast<int>(m.size());
        CHECK(unmasked_avail >= 1);
        for (int o : m) CHECK(avail[o] == 1);
      }
    }
  }
}

TEST_CASE("proxy names parse and print") {
  CHECK(parse_proxy("a1") == SaliencyProxy::LastLayer);
  CHECK(parse_proxy("a2") == SaliencyProxy::AllLayerAverage);
  CHECK(parse_proxy("a3") == SaliencyProxy::Rollout);
  CHECK(proxy_name(SaliencyProxy::Rollout) == "a3");
  CHECK_THROWS(parse_proxy("a4"));
}
