#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "panfm/cohort.hpp"
#include "panfm/metrics.hpp"
#include "panfm/schema.hpp"

using namespace panfm;
namespace fs = std::filesystem;

namespace {

CohortGenConfig desk_gen(int participants, uint64_t seed) {
  CohortGenConfig cfg;
  cfg.participants = participants;
  cfg.latent_dim = 4;
  cfg.signal_scale = 1.0;
  cfg.noise_scale = 0.5;
  cfg.dominant_organ = "Adipose";
  cfg.dominance_multiplier = 3.0;
  const auto schema = desk_schema();
  for (const auto& o : schema.organs()) cfg.availability[o.name] = 1.0;
  cfg.tasks = {{"global", {4.0, 0.0, 0.0, 0.0}, 0.0}, {"mixed", {0.7, 0.7, 0.7, 0.7}, 0.0}};
  cfg.seed = seed;
  return cfg;
}

std::string tmp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

// Gauss-Jordan solve of S x = b for the closed-form linear readout oracle.
std::vector<double> solve(std::vector<double> s, std::vector<double> b, int n) {
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(s[r * n + col]) > std::abs(s[piv * n + col])) piv = r;
    for (int c = 0; c < n; ++c) std::swap(s[col * n + c], s[piv * n + c]);
    std::swap(b[col], b[piv]);
    const double d = s[col * n + col];
    for (int c = 0; c < n; ++c) s[col * n + c] /= d;
    b[col] /= d;
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = s[r * n + col];
      for (int c = 0; c < n; ++c) s[r * n + c] -= f * s[col * n + c];
      b[r] -= f * b[col];
    }
  }
  return b;
}

}  // namespace

TEST_CASE("reference schema layout") {
  auto s = reference_schema();
  CHECK(s.total_tokens() == 128);
  CHECK(s.total_feature_dim() == 228);
  CHECK(s.span(0) == std::pair<int, int>{0, 64});
  CHECK(s.organs()[0].name == "Brain");
}

TEST_CASE("single-organ schema") {
  OrganSchema s({{"X", 2, 1}});
  CHECK(s.total_tokens() == 1);
  CHECK(s.span(0) == std::pair<int, int>{0, 1});
}

TEST_CASE("schema validation errors name the entry") {
  CHECK_THROWS_WITH_AS(OrganSchema({{"A", 2, 1}, {"A", 3, 1}}), doctest::Contains("A"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(OrganSchema({{"B", 0, 1}}), doctest::Contains("B"), std::runtime_error);
  CHECK_THROWS_WITH_AS(OrganSchema({{"C", 2, 0}}), doctest::Contains("C"), std::runtime_error);
}

TEST_CASE("schema json round trip") {
  const std::string p = tmp_path("panfm_schema_test.json");
  save_schema(desk_schema(), p);
  auto loaded = load_schema(p);
  CHECK(loaded == desk_schema());
  fs::remove(p);
}

TEST_CASE("generate_cohort: full availability gives complete records") {
  auto cfg = desk_gen(64, 1);
  auto recs = generate_cohort(cfg, desk_schema());
  REQUIRE(recs.size() == 64);
  for (const auto& r : recs) CHECK(r.complete());
}

TEST_CASE("generate_cohort: empirical coverage tracks configured rates") {
  auto cfg = desk_gen(10000, 2);
  cfg.availability = {{"Brain", 0.77}, {"Heart", 0.83},  {"Adipose", 0.64}, {"Liver", 0.64},
                      {"Kidney", 0.84}, {"Spleen", 0.66}, {"Pancreas", 0.64}};
  auto schema = desk_schema();
  auto recs = generate_cohort(cfg, schema);
  std::vector<int> counts(schema.organ_count(), 0);
  for (const auto& r : recs) {
    CHECK(r.available_count() >= 1);
    for (int o = 0; o < schema.organ_count(); ++o) counts[o] += r.organs[o] ? 1 : 0;
  }
  for (int o = 0; o < schema.organ_count(); ++o) {
    const double rate = counts[o] / 10000.0;
    const double want = cfg.availability.at(schema.organs()[o].name);
    CHECK(std::abs(rate - want) < 0.02);
  }
}

TEST_CASE("generate_cohort: identical seeds give byte-identical jsonl") {
  auto cfg = desk_gen(200, 7);
  cfg.availability["Brain"] = 0.8;
  auto schema = desk_schema();
  const std::string p1 = tmp_path("panfm_cohort_a.jsonl"), p2 = tmp_path("panfm_cohort_b.jsonl");
  write_jsonl(generate_cohort(cfg, schema), schema, p1);
  write_jsonl(generate_cohort(cfg, schema), schema, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string a((std::istreambuf_iterator<char>(f1)), {});
  std::string b((std::istreambuf_iterator<char>(f2)), {});
  CHECK(a == b);
  CHECK_FALSE(a.empty());
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("planted shortcut: dominant organ carries the most task signal") {
  // closed-form optimal linear readout per organ:
  //   score(x_o) = (A_o w)^T (A_o A_o^T + noise^2 I)^-1 x_o
  auto cfg = desk_gen(4000, 3);
  auto schema = desk_schema();
  auto recs = generate_cohort(cfg, schema);
  auto loadings = generator_loadings(cfg, schema);
  const int F = cfg.latent_dim;
  const std::vector<double> w = {4.0, 0.0, 0.0, 0.0};

  std::vector<double> auc(schema.organ_count());
  for (int o = 0; o < schema.organ_count(); ++o) {
    const int D = schema.organs()[o].feature_dim;
    const auto& A = loadings[o];
    std::vector<double> cov(D * D, 0.0);
    for (int i = 0; i < D; ++i)
      for (int j = 0; j < D; ++j) {
        double acc = 0.0;
        for (int f = 0; f < F; ++f) acc += A[i * F + f] * A[j * F + f];
        cov[i * D + j] = acc + (i == j ? cfg.noise_scale * cfg.noise_scale : 0.0);
      }
    std::vector<double> aw(D, 0.0);
    for (int i = 0; i < D; ++i)
      for (int f = 0; f < F; ++f) aw[i] += A[i * F + f] * w[f];
    auto beta = solve(cov, aw, D);
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : recs) {
      const auto& x = *r.organs[o];
      double s = 0.0;
      for (int i = 0; i < D; ++i) s += beta[i] * x[i];
      scores.push_back(s);
      labels.push_back(r.labels.at("global"));
    }
    auc[o] = auroc(scores, labels);
  }
  const int dom = schema.index_of("Adipose");
  for (int o = 0; o < schema.organ_count(); ++o) {
    if (o == dom) continue;
    CHECK(auc[dom] >= auc[o] + 0.05);
  }
}

TEST_CASE("norm stats basics") {
  OrganSchema schema({{"X", 1, 1}});
  ParticipantRecord a, b;
  a.id = 0;
  a.organs = {std::vector<double>{0.0}};
  b.id = 1;
  b.organs = {std::vector<double>{2.0}};
  auto stats = compute_norm_stats({a, b}, schema);
  CHECK(stats.mean[0][0] == doctest::Approx(1.0));
  CHECK(stats.std[0][0] == doctest::Approx(1.0));

  // constant feature floors the std
  b.organs = {std::vector<double>{0.0}};
  auto flat = compute_norm_stats({a, b}, schema);
  CHECK(flat.std[0][0] == doctest::Approx(1e-8));

  // never observed organ
  OrganSchema two({{"X", 1, 1}, {"Y", 1, 1}});
  ParticipantRecord c;
  c.id = 0;
  c.organs = {std::vector<double>{1.0}, std::nullopt};
  CHECK_THROWS_WITH_AS(compute_norm_stats({c}, two), doctest::Contains("Y"), std::runtime_error);
}

TEST_CASE("norm stats vs two-pass oracle on random cohort") {
  auto cfg = desk_gen(500, 11);
  cfg.availability["Liver"] = 0.5;
  auto schema = desk_schema();
  auto recs = generate_cohort(cfg, schema);
  auto stats = compute_norm_stats(recs, schema);
  for (int o = 0; o < schema.organ_count(); ++o) {
    const int D = schema.organs()[o].feature_dim;
    for (int i = 0; i < D; ++i) {
      double sum = 0.0;
      int64_t n = 0;
      for (const auto& r : recs)
        if (r.organs[o]) {
          sum += (*r.organs[o])[i];
          ++n;
        }
      const double mean = sum / n;
      double var = 0.0;
      for (const auto& r : recs)
        if (r.organs[o]) var += ((*r.organs[o])[i] - mean) * ((*r.organs[o])[i] - mean);
      var /= n;
      CHECK(std::abs(stats.mean[o][i] - mean) < 1e-10);
      CHECK(std::abs(stats.std[o][i] - std::sqrt(var)) < 1e-10);
    }
  }
}

TEST_CASE("normalize: identities and re-estimation") {
  OrganSchema schema({{"X", 2, 1}});
  NormStats stats;
  stats.mean = {{1.0, -2.0}};
  stats.std = {{2.0, 0.5}};
  ParticipantRecord r;
  r.id = 0;
  r.organs = {std::vector<double>{1.0, -2.0}};
  auto z = normalize(r, stats);
  CHECK((*z.organs[0])[0] == doctest::Approx(0.0));
  r.organs = {std::vector<double>{3.0, -1.5}};
  z = normalize(r, stats);
  CHECK((*z.organs[0])[0] == doctest::Approx(1.0));
  CHECK((*z.organs[0])[1] == doctest::Approx(1.0));

  auto cfg = desk_gen(300, 13);
  auto schema7 = desk_schema();
  auto recs = generate_cohort(cfg, schema7);
  auto st = compute_norm_stats(recs, schema7);
  auto normed = normalize_all(recs, st);
  auto st2 = compute_norm_stats(normed, schema7);
  for (int o = 0; o < schema7.organ_count(); ++o)
    for (size_t i = 0; i < st2.mean[o].size(); ++i) {
      CHECK(std::abs(st2.mean[o][i]) < 1e-10);
      CHECK(std::abs(st2.std[o][i] - 1.0) < 1e-10);
    }

  // invertibility
  for (size_t p = 0; p < recs.size(); ++p)
    for (int o = 0; o < schema7.organ_count(); ++o) {
      if (!recs[p].organs[o]) continue;
      for (size_t i = 0; i < st.mean[o].size(); ++i) {
        const double back = (*normed[p].organs[o])[i] * st.std[o][i] + st.mean[o][i];
        CHECK(std::abs(back - (*recs[p].organs[o])[i]) < 1e-10);
      }
    }
}

TEST_CASE("split_cohort: partition, determinism, stratification") {
  auto cfg = desk_gen(4000, 17);
  auto schema = desk_schema();
  auto recs = generate_cohort(cfg, schema);

  auto all = split_cohort(recs, {1.0, 0.0, 0.0, 0.0}, 5);
  CHECK(all.pretrain.size() == recs.size());
  CHECK(all.train.empty());

  auto s1 = split_cohort(recs, {0.5, 0.3, 0.1, 0.1}, 5);
  auto s2 = split_cohort(recs, {0.5, 0.3, 0.1, 0.1}, 5);
  std::set<int64_t> seen;
  size_t total = 0;
  double global_pos = 0.0;
  for (const auto& r : recs) global_pos += r.labels.at("global");
  global_pos /= recs.size();
  for (auto* part : {&s1.pretrain, &s1.train, &s1.val, &s1.test}) {
    total += part->size();
    double pos = 0.0;
    for (const auto& r : *part) {
      CHECK(seen.insert(r.id).second);
      pos += r.labels.at("global");
    }
    pos /= part->size();
    CHECK(std::abs(pos - global_pos) < 0.03);
  }
  CHECK(total == recs.size());
  for (size_t i = 0; i < s1.test.size(); ++i) CHECK(s1.test[i].id == s2.test[i].id);

  CHECK_THROWS(split_cohort(recs, {0.5, 0.5, 0.5, 0.5}, 5));
}

TEST_CASE("jsonl round trip and ingest rules") {
  auto cfg = desk_gen(100, 19);
  cfg.availability["Heart"] = 0.7;
  auto schema = desk_schema();
  auto recs = generate_cohort(cfg, schema);
  const std::string p = tmp_path("panfm_roundtrip.jsonl");
  write_jsonl(recs, schema, p);
  auto back = read_jsonl(schema, p);
  REQUIRE(back.size() == recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].id == recs[i].id);
    CHECK(back[i].labels == recs[i].labels);
    for (int o = 0; o < schema.organ_count(); ++o) {
      CHECK(back[i].organs[o].has_value() == recs[i].organs[o].has_value());
      if (recs[i].organs[o]) CHECK(*back[i].organs[o] == *recs[i].organs[o]);
    }
  }
  fs::remove(p);

  // short organ vector -> unavailable after ingest
  {
    std::ofstream f(p);
    f << R"({"id":0,"organs":{"Brain":[1,2,3],"Heart":[1,2,3,4,5,6,7,8],"Adipose":null,)"
      << R"("Liver":null,"Kidney":null,"Spleen":null,"Pancreas":null},"labels":{"global":1}})"
      << "\n";
  }
  auto ingest = read_jsonl(schema, p);
  REQUIRE(ingest.size() == 1);
  CHECK_FALSE(ingest[0].organs[schema.index_of("Brain")].has_value());
  CHECK(ingest[0].organs[schema.index_of("Heart")].has_value());
  fs::remove(p);

  // empty file -> empty cohort
  {
    std::ofstream f(p);
  }
  CHECK(read_jsonl(schema, p).empty());
  fs::remove(p);

  // malformed line -> error carries line number
  {
    std::ofstream f(p);
    f << R"({"id":0,"organs":{)" << "\n";
  }
  CHECK_THROWS_WITH_AS(read_jsonl(schema, p), doctest::Contains(":1"), std::runtime_error);
  fs::remove(p);
}
