#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "panfm/checkpoint.hpp"
#include "panfm/model.hpp"
#include "panfm/rng.hpp"

using namespace panfm;
namespace fs = std::filesystem;

namespace {

OrganSchema tiny_schema() { return OrganSchema({{"A", 3, 2}, {"B", 2, 1}}); }

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.proto_dim = 5;
  cfg.head_hidden = 6;
  return cfg;
}

ParticipantRecord make_record(int64_t id, const OrganSchema& schema, RngStream& rng,
                              const std::vector<int>& missing = {}) {
  ParticipantRecord r;
  r.id = id;
  r.organs.resize(schema.organ_count());
  for (int o = 0; o < schema.organ_count(); ++o) {
    if (std::find(missing.begin(), missing.end(), o) != missing.end()) continue;
    std::vector<double> x(schema.organs()[o].feature_dim);
    for (auto& v : x) v = rng.normal();
    r.organs[o] = std::move(x);
  }
  return r;
}

void set_param(PanModel& m, const std::string& name, double v) {
  for (auto& e : m.params().entries)
    if (e.name == name)
      for (auto& x : e.tensor.data_mut()) x = v;
}

}  // namespace

TEST_CASE("cape: single feature key makes every token the value row") {
  OrganSchema schema({{"X", 1, 3}});
  PanModel m(schema, tiny_config(), 1);
  auto z = m.cape_encode({0.7}, 0);
  REQUIRE(z.shape() == std::vector<int>{3, 4});
  for (int t = 1; t < 3; ++t)
    for (int c = 0; c < 4; ++c)
      CHECK(z.data()[t * 4 + c] == doctest::Approx(z.data()[c]).epsilon(1e-12));
}

TEST_CASE("cape: zero features with zero embedding bias give zero tokens") {
  OrganSchema schema({{"X", 3, 2}});
  PanModel m(schema, tiny_config(), 2);
  set_param(m, "cape.X.emb_b", 0.0);
  auto z = m.cape_encode({0.0, 0.0, 0.0}, 0);
  for (auto v : z.data()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("cape matches explicit dense oracle") {
  OrganSchema schema({{"X", 3, 2}});
  ModelConfig cfg = tiny_config();
  PanModel m(schema, cfg, 3);
  std::vector<double> x = {0.3, -1.2, 0.8};
  auto z = m.cape_encode(x, 0);

  const auto& w = *m.params().find("cape.X.emb_w");
  const auto& b = *m.params().find("cape.X.emb_b");
  const auto& q = *m.params().find("cape.X.queries");
  const auto& wq = *m.params().find("cape.X.wq");
  const auto& wk = *m.params().find("cape.X.wk");
  const auto& wv = *m.params().find("cape.X.wv");
  const int D = 3, K = 2, d = 4;
  std::vector<double> e(D * d);
  for (int i = 0; i < D; ++i)
    for (int c = 0; c < d; ++c) e[i * d + c] = x[i] * w.data()[i * d + c] + b.data()[i * d + c];
  auto mm = [&](const std::vector<double>& a, std::span<const double> bm, int m_, int k_, int n_) {
    std::vector<double> out(m_ * n_, 0.0);
    for (int i = 0; i < m_; ++i)
      for (int p = 0; p < k_; ++p)
        for (int j = 0; j < n_; ++j) out[i * n_ + j] += a[i * k_ + p] * bm[p * n_ + j];
    return out;
  };
  std::vector<double> qv(q.data().begin(), q.data().end());
  auto qw = mm(qv, wq.data(), K, d, d);
  auto ek = mm(e, wk.data(), D, d, d);
  auto ev = mm(e, wv.data(), D, d, d);
  std::vector<double> want(K * d, 0.0);
  for (int t = 0; t < K; ++t) {
    std::vector<double> s(D);
    double mx = -1e300;
    for (int i = 0; i < D; ++i) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += qw[t * d + c] * ek[i * d + c];
      s[i] = acc / std::sqrt(4.0);
      mx = std::max(mx, s[i]);
    }
    double zsum = 0.0;
    for (int i = 0; i < D; ++i) {
      s[i] = std::exp(s[i] - mx);
      zsum += s[i];
    }
    for (int i = 0; i < D; ++i)
      for (int c = 0; c < d; ++c) want[t * d + c] += (s[i] / zsum) * ev[i * d + c];
  }
  for (int i = 0; i < K * d; ++i) CHECK(std::abs(z.data()[i] - want[i]) < 1e-12);
}

TEST_CASE("cape is equivariant under feature permutation with paired weights") {
  OrganSchema schema({{"X", 3, 2}});
  PanModel m(schema, tiny_config(), 4);
  std::vector<double> x = {0.5, -0.7, 1.1};
  auto z1 = m.cape_encode(x, 0).detach();

  // permute features (rotate by 1) together with their (w_i, b_i) rows
  auto rotate_rows = [&](const std::string& name) {
    for (auto& e : m.params().entries)
      if (e.name == name) {
        auto buf = e.tensor.data_mut();
        std::vector<double> tmp(buf.begin(), buf.end());
        const int d = 4;
        for (int i = 0; i < 3; ++i)
          for (int c = 0; c < d; ++c) buf[((i + 1) % 3) * d + c] = tmp[i * d + c];
      }
  };
  rotate_rows("cape.X.emb_w");
  rotate_rows("cape.X.emb_b");
  std::vector<double> xr = {x[2], x[0], x[1]};
  auto z2 = m.cape_encode(xr, 0);
  for (int i = 0; i < 8; ++i) CHECK(z2.data()[i] == doctest::Approx(z1.data()[i]).epsilon(1e-12));
}

TEST_CASE("assemble: observed spans are tokens + organ embedding, masked spans are mask + organ embedding") {
  auto schema = tiny_schema();
  PanModel m(schema, tiny_config(), 5);
  RngStream rng(9);
  auto rec = make_record(0, schema, rng);

  auto seq = m.assemble_sequence(rec.organs, {});
  REQUIRE(seq.shape() == std::vector<int>{4, 4});  // CLS + 2 + 1 tokens
  auto z0 = m.cape_encode(*rec.organs[0], 0);
  const auto& pos0 = *m.params().find("seq.A.pos");
  for (int t = 0; t < 2; ++t)
    for (int c = 0; c < 4; ++c)
      CHECK(seq.data()[(1 + t) * 4 + c] ==
            doctest::Approx(z0.data()[t * 4 + c] + pos0.data()[t * 4 + c]).epsilon(1e-12));

  // organ B missing: span equals mask + organ embedding
  auto rec2 = rec;
  rec2.organs[1].reset();
  auto seq2 = m.assemble_sequence(rec2.organs, {});
  const auto& maskB = *m.params().find("seq.B.mask");
  const auto& posB = *m.params().find("seq.B.pos");
  for (int c = 0; c < 4; ++c)
    CHECK(seq2.data()[3 * 4 + c] == doctest::Approx(maskB.data()[c] + posB.data()[c]));

  // organ B available but masked: identical content to the missing case
  auto seq3 = m.assemble_sequence(rec.organs, {0, 1});
  for (int i = 0; i < 16; ++i) CHECK(seq3.data()[i] == seq2.data()[i]);

  // masking an unavailable organ violates the contract
  CHECK_THROWS(m.assemble_sequence(rec2.organs, {0, 1}));
}

TEST_CASE("assemble is content-blind to masked organs") {
  auto schema = tiny_schema();
  PanModel m(schema, tiny_config(), 6);
  RngStream rng(10);
  auto rec = make_record(0, schema, rng);
  auto seq1 = m.assemble_sequence(rec.organs, {1, 0}).detach();
  (*rec.organs[0])[0] += 123.0;  // perturb masked organ's stored features
  auto seq2 = m.assemble_sequence(rec.organs, {1, 0});
  for (int i = 0; i < seq1.numel(); ++i) CHECK(seq1.data()[i] == seq2.data()[i]);
}

TEST_CASE("backbone: zero-weight blocks pass the sequence through the residual path") {
  auto schema = tiny_schema();
  PanModel m(schema, tiny_config(), 7);
  for (int l = 0; l < 2; ++l) {
    const std::string p = "backbone.l" + std::to_string(l) + ".";
    for (const char* nm : {"attn.wo", "attn.bo", "mlp.w2", "mlp.b2"}) set_param(m, p + nm, 0.0);
  }
  RngStream rng(11);
  auto rec = make_record(0, schema, rng);
  auto seq = m.assemble_sequence(rec.organs, {});
  auto out = m.run_blocks(seq, 1);
  for (int i = 0; i < seq.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(seq.data()[i]).epsilon(1e-12));
}

TEST_CASE("backbone: captured CLS rows are normalized distributions") {
  auto schema = tiny_schema();
  PanModel m(schema, tiny_config(), 8);
  RngStream rng(12);
  std::vector<ParticipantRecord> recs{make_record(0, schema, rng), make_record(1, schema, rng)};
  std::vector<const ParticipantRecord*> batch{&recs[0], &recs[1]};
  auto fwd = m.forward_batch(batch, {}, CaptureMode::ClsRows);
  REQUIRE(fwd.capture.batch == 2);
  for (int b = 0; b < 2; ++b)
    for (int l = 0; l < 2; ++l)
      for (int h = 0; h < 2; ++h) {
        double s = 0.0;
        for (double v : fwd.capture.cls_rows[b][l][h]) {
          CHECK(v >= 0.0);
          s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-10);
      }
}

TEST_CASE("backbone single-block forward matches fully expanded oracle") {
  OrganSchema schema({{"X", 2, 2}});
  ModelConfig cfg;
  cfg.d = 2;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.proto_dim = 3;
  cfg.head_hidden = 3;
  PanModel m(schema, cfg, 13);
  RngStream rng(14);
  auto rec = make_record(0, schema, rng);
  auto seq = m.assemble_sequence(rec.organs, {}).detach();
  auto out = m.final_norm(m.run_blocks(m.assemble_sequence(rec.organs, {}), 1));

  auto get = [&](const std::string& n) {
    const Tensor* t = m.params().find(n);
    REQUIRE(t != nullptr);
    return std::vector<double>(t->data().begin(), t->data().end());
  };
  const int S = 3, d = 2;
  auto x = std::vector<double>(seq.data().begin(), seq.data().end());
  auto ln = [&](std::vector<double> v, const std::vector<double>& g,
                const std::vector<double>& b) {
    for (int i = 0; i < S; ++i) {
      double mu = 0, var = 0;
      for (int c = 0; c < d; ++c) mu += v[i * d + c];
      mu /= d;
      for (int c = 0; c < d; ++c) var += (v[i * d + c] - mu) * (v[i * d + c] - mu);
      var /= d;
      for (int c = 0; c < d; ++c)
        v[i * d + c] = (v[i * d + c] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
    }
    return v;
  };
  auto lin = [&](const std::vector<double>& v, const std::vector<double>& w,
                 const std::vector<double>& b, int rows, int din, int dout) {
    std::vector<double> o(rows * dout);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < dout; ++j) {
        double acc = b[j];
        for (int c = 0; c < din; ++c) acc += v[i * din + c] * w[c * dout + j];
        o[i * dout + j] = acc;
      }
    return o;
  };
  auto h = ln(x, get("backbone.l0.ln1.g"), get("backbone.l0.ln1.b"));
  auto q = lin(h, get("backbone.l0.attn.wq"), get("backbone.l0.attn.bq"), S, d, d);
  auto kk = lin(h, get("backbone.l0.attn.wk"), get("backbone.l0.attn.bk"), S, d, d);
  auto vv = lin(h, get("backbone.l0.attn.wv"), get("backbone.l0.attn.bv"), S, d, d);
  std::vector<double> attn_out(S * d, 0.0);
  for (int i = 0; i < S; ++i) {
    std::vector<double> s(S);
    double mx = -1e300;
    for (int j = 0; j < S; ++j) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += q[i * d + c] * kk[j * d + c];
      s[j] = acc / std::sqrt(2.0);
      mx = std::max(mx, s[j]);
    }
    double zsum = 0.0;
    for (int j = 0; j < S; ++j) {
      s[j] = std::exp(s[j] - mx);
      zsum += s[j];
    }
    for (int j = 0; j < S; ++j)
      for (int c = 0; c < d; ++c) attn_out[i * d + c] += s[j] / zsum * vv[j * d + c];
  }
  auto proj = lin(attn_out, get("backbone.l0.attn.wo"), get("backbone.l0.attn.bo"), S, d, d);
  for (int i = 0; i < S * d; ++i) x[i] += proj[i];
  auto h2 = ln(x, get("backbone.l0.ln2.g"), get("backbone.l0.ln2.b"));
  auto m1 = lin(h2, get("backbone.l0.mlp.w1"), get("backbone.l0.mlp.b1"), S, d, 4 * d);
  for (auto& v : m1) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  auto m2 = lin(m1, get("backbone.l0.mlp.w2"), get("backbone.l0.mlp.b2"), S, 4 * d, d);
  for (int i = 0; i < S * d; ++i) x[i] += m2[i];
  auto fin = ln(x, get("backbone.final.g"), get("backbone.final.b"));
  for (int i = 0; i < S * d; ++i) CHECK(std::abs(out.data()[i] - fin[i]) < 1e-10);
}

TEST_CASE("forward purity: capture on/off gives identical cls") {
  auto schema = tiny_schema();
  PanModel m(schema, tiny_config(), 15);
  RngStream rng(16);
  auto rec = make_record(0, schema, rng);
  std::vector<const ParticipantRecord*> batch{&rec};
  auto a = m.forward_batch(batch, {}, CaptureMode::None);
  auto b = m.forward_batch(batch, {}, CaptureMode::Full);
  for (int i = 0; i < a.cls.numel(); ++i) CHECK(a.cls.data()[i] == b.cls.data()[i]);
}

TEST_CASE("projection head: weight-normalized rows, freeze flag, zero path") {
  auto schema = tiny_schema();
  PanModel m(schema, tiny_config(), 17);
  auto wn = m.normalized_prototypes();
  for (int r = 0; r < wn.shape()[0]; ++r) {
    double s = 0.0;
    for (int c = 0; c < wn.shape()[1]; ++c)
      s += wn.data()[r * wn.shape()[1] + c] * wn.data()[r * wn.shape()[1] + c];
    CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-10);
  }

  // zero input with zero biases -> zero hiddens and zero logits
  set_param(m, "head.b1", 0.0);
  set_param(m, "head.b2", 0.0);
  auto logits0 = m.project_head(Tensor::zeros({2, 4}));
  for (double v : logits0.data()) CHECK(v == doctest::Approx(0.0));

  // freeze flag: no gradient reaches the prototype layer
  RngStream rng(18);
  auto rec = make_record(0, schema, rng);
  std::vector<const ParticipantRecord*> batch{&rec};
  m.set_head_frozen(true);
  m.params().zero_grad();
  auto fwd = m.forward_batch(batch, {});
  mean_all(square(m.project_head(fwd.cls))).backward();
  const Tensor* w3 = m.params().find("head.w3");
  for (double g : w3->grad()) CHECK(g == 0.0);

  m.set_head_frozen(false);
  m.params().zero_grad();
  auto fwd2 = m.forward_batch(batch, {});
  mean_all(square(m.project_head(fwd2.cls))).backward();
  double total = 0.0;
  for (double g : w3->grad()) total += std::abs(g);
  CHECK(total > 0.0);
}

TEST_CASE("gradients reach mask token only when its organ span is masked") {
  auto schema = tiny_schema();
  PanModel m(schema, tiny_config(), 19);
  RngStream rng(20);
  auto rec = make_record(0, schema, rng);
  std::vector<const ParticipantRecord*> batch{&rec};

  m.params().zero_grad();
  auto fwd = m.forward_batch(batch, {{0, 1}});  // organ B masked
  mean_all(square(fwd.cls)).backward();
  auto gsum = [&](const std::string& n) {
    double s = 0.0;
    for (double g : m.params().find(n)->grad()) s += std::abs(g);
    return s;
  };
  CHECK(gsum("seq.B.mask") > 0.0);
  CHECK(gsum("seq.A.mask") == 0.0);
  CHECK(gsum("cape.B.queries") == 0.0);  // masked organ's encoder sees no gradient
  CHECK(gsum("cape.A.queries") > 0.0);
  CHECK(gsum("seq.A.pos") > 0.0);  // organ embeddings always participate
  CHECK(gsum("seq.B.pos") > 0.0);
}

TEST_CASE("finite differences through every backbone layer, cape and head") {
  OrganSchema schema({{"A", 2, 2}, {"B", 2, 1}});
  ModelConfig cfg;
  cfg.d = 4;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.proto_dim = 3;
  cfg.head_hidden = 4;
  PanModel m(schema, cfg, 21);
  RngStream rng(22);
  auto r0 = make_record(0, schema, rng);
  auto r1 = make_record(1, schema, rng, {1});  // one organ missing
  std::vector<const ParticipantRecord*> batch{&r0, &r1};
  auto f = [&] {
    auto fwd = m.forward_batch(batch, {});
    return mean_all(square(m.project_head(fwd.cls)));
  };
  std::vector<Tensor> params;
  for (auto& e : m.params().entries) params.push_back(e.tensor);
  CHECK(finite_difference_max_err(f, params) < 1e-4);
}

TEST_CASE("model config json round trip") {
  const std::string p = (fs::temp_directory_path() / "panfm_model_cfg.json").string();
  ModelConfig cfg = tiny_config();
  save_model_config(cfg, p);
  auto back = load_model_config(p);
  CHECK(back.d == cfg.d);
  CHECK(back.layers == cfg.layers);
  CHECK(back.heads == cfg.heads);
  CHECK(back.proto_dim == cfg.proto_dim);
  CHECK(back.head_hidden == cfg.head_hidden);
  fs::remove(p);
  CHECK_THROWS(load_model_config("/nonexistent/model.json"));
}

TEST_CASE("checkpoint round trip preserves forward outputs bit-exactly") {
  auto schema = tiny_schema();
  PanModel m(schema, tiny_config(), 23);
  RngStream rng(24);
  auto rec = make_record(0, schema, rng);
  std::vector<const ParticipantRecord*> batch{&rec};
  auto before = m.forward_batch(batch, {}).cls.detach();

  const std::string dir = (fs::temp_directory_path() / "panfm_ckpt_test").string();
  save_checkpoint(m.params(), dir);
  PanModel other(schema, tiny_config(), 999);
  load_checkpoint(other.params(), dir);
  auto after = other.forward_batch(batch, {}).cls;
  for (int i = 0; i < before.numel(); ++i) CHECK(before.data()[i] == after.data()[i]);
  fs::remove_all(dir);
}
