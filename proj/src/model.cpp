#include "panfm/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "panfm/util.hpp"

namespace panfm {

using nlohmann::json;

void ModelConfig::validate() const {
  PF_CHECK(d >= 1 && layers >= 1 && heads >= 1 && proto_dim >= 1 && head_hidden >= 1,
           "model config: all dimensions must be positive");
  PF_CHECK(d % heads == 0, "model config: d (", d, ") must be divisible by heads (", heads, ")");
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream f(path);
  PF_CHECK(f.good(), "model config: cannot open ", path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail(msg("model config: parse error in ", path, ": ", e.what()));
  }
  ModelConfig cfg;
  cfg.d = j.at("d").get<int>();
  cfg.layers = j.at("L").get<int>();
  cfg.heads = j.at("H").get<int>();
  cfg.proto_dim = j.at("P").get<int>();
  cfg.head_hidden = j.at("head_hidden").get<int>();
  cfg.validate();
  return cfg;
}

void save_model_config(const ModelConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  PF_CHECK(f.good(), "model config: cannot write ", path);
  f << json{{"d", cfg.d}, {"L", cfg.layers}, {"H", cfg.heads}, {"P", cfg.proto_dim},
            {"head_hidden", cfg.head_hidden}}
           .dump(2)
    << "\n";
}

namespace {

Tensor init_tensor(std::vector<int> shape, RngStream& rng, double scale = 0.02) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.normal() * scale;
  return Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

}  // namespace

PanModel::PanModel(const OrganSchema& schema, const ModelConfig& cfg, uint64_t init_seed)
    : schema_(schema), cfg_(cfg) {
  cfg_.validate();
  RngStream root(init_seed);
  RngStream rng = root.substream("model-init");
  const int d = cfg_.d;

  for (const OrganSpec& o : schema_.organs()) {
    Cape c;
    c.emb_w = init_tensor({o.feature_dim, d}, rng);
    c.emb_b = init_tensor({o.feature_dim, d}, rng);
    c.queries = init_tensor({o.token_count, d}, rng);
    c.wq = init_tensor({d, d}, rng);
    c.wk = init_tensor({d, d}, rng);
    c.wv = init_tensor({d, d}, rng);
    params_.add("cape." + o.name + ".emb_w", c.emb_w);
    params_.add("cape." + o.name + ".emb_b", c.emb_b);
    params_.add("cape." + o.name + ".queries", c.queries);
    params_.add("cape." + o.name + ".wq", c.wq);
    params_.add("cape." + o.name + ".wk", c.wk);
    params_.add("cape." + o.name + ".wv", c.wv);
    cape_.push_back(std::move(c));
  }
  for (const OrganSpec& o : schema_.organs()) {
    mask_tok_.push_back(params_.add("seq." + o.name + ".mask", init_tensor({d}, rng)));
    organ_emb_.push_back(
        params_.add("seq." + o.name + ".pos", init_tensor({o.token_count, d}, rng)));
  }
  cls_emb_ = params_.add("seq.cls", init_tensor({d}, rng));

  for (int l = 0; l < cfg_.layers; ++l) {
    Block b;
    const std::string p = "backbone.l" + std::to_string(l) + ".";
    b.ln1_g = params_.add(p + "ln1.g", Tensor::full({d}, 1.0, true));
    b.ln1_b = params_.add(p + "ln1.b", Tensor::zeros({d}, true));
    b.wq = params_.add(p + "attn.wq", init_tensor({d, d}, rng));
    b.bq = params_.add(p + "attn.bq", Tensor::zeros({d}, true));
    b.wk = params_.add(p + "attn.wk", init_tensor({d, d}, rng));
    b.bk = params_.add(p + "attn.bk", Tensor::zeros({d}, true));
    b.wv = params_.add(p + "attn.wv", init_tensor({d, d}, rng));
    b.bv = params_.add(p + "attn.bv", Tensor::zeros({d}, true));
    b.wo = params_.add(p + "attn.wo", init_tensor({d, d}, rng));
    b.bo = params_.add(p + "attn.bo", Tensor::zeros({d}, true));
    b.ln2_g = params_.add(p + "ln2.g", Tensor::full({d}, 1.0, true));
    b.ln2_b = params_.add(p + "ln2.b", Tensor::zeros({d}, true));
    b.mlp_w1 = params_.add(p + "mlp.w1", init_tensor({d, 4 * d}, rng));
    b.mlp_b1 = params_.add(p + "mlp.b1", Tensor::zeros({4 * d}, true));
    b.mlp_w2 = params_.add(p + "mlp.w2", init_tensor({4 * d, d}, rng));
    b.mlp_b2 = params_.add(p + "mlp.b2", Tensor::zeros({d}, true));
    blocks_.push_back(std::move(b));
  }
  final_g_ = params_.add("backbone.final.g", Tensor::full({d}, 1.0, true));
  final_b_ = params_.add("backbone.final.b", Tensor::zeros({d}, true));

  head_w1_ = params_.add("head.w1", init_tensor({d, cfg_.head_hidden}, rng));
  head_b1_ = params_.add("head.b1", Tensor::zeros({cfg_.head_hidden}, true));
  head_w2_ = params_.add("head.w2", init_tensor({cfg_.head_hidden, cfg_.head_hidden}, rng));
  head_b2_ = params_.add("head.b2", Tensor::zeros({cfg_.head_hidden}, true));
  head_w3_ = params_.add("head.w3", init_tensor({cfg_.proto_dim, cfg_.head_hidden}, rng));
}

Tensor PanModel::cape_encode(const std::vector<double>& features, int organ) const {
  const OrganSpec& spec = schema_.organs()[organ];
  PF_CHECK(static_cast<int>(features.size()) == spec.feature_dim, "cape_encode: organ '",
           spec.name, "' expects width ", spec.feature_dim, ", got ", features.size());
  const Cape& c = cape_[organ];
  Tensor x = Tensor::from_data({spec.feature_dim}, features);
  // E[i] = x[i] * w_i + b_i
  Tensor e = add(scale_rows(c.emb_w, x), c.emb_b);
  // single-head cross-attention with d_head = d
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d));
  Tensor scores = mul_scalar(matmul(matmul(c.queries, c.wq), transpose(matmul(e, c.wk))), scale);
  Tensor attn = softmax_rows(scores);
  return matmul(attn, matmul(e, c.wv));
}

Tensor PanModel::assemble_sequence(const std::vector<std::optional<std::vector<double>>>& organs,
                                   const std::vector<uint8_t>& masked) const {
  const int O = schema_.organ_count();
  PF_CHECK(static_cast<int>(organs.size()) == O, "assemble_sequence: organ count mismatch");
  std::vector<Tensor> parts;
  parts.reserve(O + 1);
  parts.push_back(cls_emb_);
  for (int o = 0; o < O; ++o) {
    const bool extra_mask = !masked.empty() && masked[o];
    PF_CHECK(!extra_mask || organs[o].has_value(),
             "assemble_sequence: mask set contains unavailable organ '",
             schema_.organs()[o].name, "'");
    Tensor block;
    if (organs[o].has_value() && !extra_mask)
      block = cape_encode(*organs[o], o);
    else
      block = broadcast_row(mask_tok_[o], schema_.organs()[o].token_count);
    parts.push_back(add(block, organ_emb_[o]));
  }
  return concat_rows(parts);
}

Tensor PanModel::run_blocks(const Tensor& seq, int batch, AttentionCaptureBatch* capture) const {
  const int S = schema_.total_tokens() + 1;
  PF_CHECK(seq.rank() == 2 && seq.shape()[0] == batch * S && seq.shape()[1] == cfg_.d,
           "run_blocks: expected [", batch * S, " x ", cfg_.d, "], got ", shape_str(seq.shape()));
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d / cfg_.heads));
  Tensor x = seq;
  for (int l = 0; l < cfg_.layers; ++l) {
    const Block& blk = blocks_[l];
    Tensor h = layer_norm(x, blk.ln1_g, blk.ln1_b);
    Tensor q = linear(h, blk.wq, blk.bq);
    Tensor k = linear(h, blk.wk, blk.bk);
    Tensor v = linear(h, blk.wv, blk.bv);
    Tensor a = multihead_attention(q, k, v, batch, S, cfg_.heads, scale, capture, l);
    x = add(x, linear(a, blk.wo, blk.bo));
    Tensor h2 = layer_norm(x, blk.ln2_g, blk.ln2_b);
    Tensor m = linear(gelu(linear(h2, blk.mlp_w1, blk.mlp_b1)), blk.mlp_w2, blk.mlp_b2);
    x = add(x, m);
  }
  return x;
}

Tensor PanModel::final_norm(const Tensor& x) const { return layer_norm(x, final_g_, final_b_); }

PanModel::Forward PanModel::forward_batch(const std::vector<const ParticipantRecord*>& batch,
                                          const std::vector<std::vector<uint8_t>>& masked,
                                          CaptureMode capture) const {
  PF_CHECK(!batch.empty(), "forward_batch: empty batch");
  PF_CHECK(masked.empty() || masked.size() == batch.size(),
           "forward_batch: masked size mismatch");
  const int B = static_cast<int>(batch.size());
  const int S = schema_.total_tokens() + 1;

  std::vector<Tensor> seqs;
  seqs.reserve(batch.size());
  for (size_t i = 0; i < batch.size(); ++i)
    seqs.push_back(assemble_sequence(batch[i]->organs,
                                     masked.empty() ? std::vector<uint8_t>{} : masked[i]));
  Tensor packed = concat_rows(seqs);

  Forward out;
  AttentionCaptureBatch* sink = nullptr;
  if (capture != CaptureMode::None) {
    out.capture.init(B, cfg_.layers, cfg_.heads, S, capture == CaptureMode::Full);
    sink = &out.capture;
  }
  Tensor x = final_norm(run_blocks(packed, B, sink));
  out.tokens = x;
  out.cls = take_rows_strided(x, 0, S, B);
  return out;
}

Tensor PanModel::normalized_prototypes() const { return l2_normalize_rows(head_w3_); }

Tensor PanModel::project_head(const Tensor& cls) const {
  Tensor h = gelu(linear(cls, head_w1_, head_b1_));
  h = gelu(linear(h, head_w2_, head_b2_));
  Tensor proto = normalized_prototypes();
  if (head_frozen_) proto = proto.detach();
  return matmul(h, transpose(proto));
}

PanModel PanModel::clone() const {
  PanModel other(schema_, cfg_, /*init_seed=*/0);
  other.params_.copy_values_from(params_);
  other.head_frozen_ = head_frozen_;
  return other;
}

AttentionCapture PanModel::slice_capture(const AttentionCaptureBatch& bc, int b) {
  PF_CHECK(b >= 0 && b < bc.batch, "slice_capture: index out of range");
  AttentionCapture c;
  c.layers = bc.layers;
  c.heads = bc.heads;
  c.seq = bc.seq;
  c.cls_rows = bc.cls_rows[b];
  if (bc.want_full) {
    c.full = bc.full[b];
    c.has_full = true;
  }
  return c;
}

}  // namespace panfm
