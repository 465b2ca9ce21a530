#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "panfm/cohort.hpp"
#include "panfm/optim.hpp"
#include "panfm/rng.hpp"
#include "panfm/schema.hpp"
#include "panfm/tensor.hpp"

namespace panfm {

// model.json: {d, L, H, P, head_hidden}
struct ModelConfig {
  int d = 32;           // token width
  int layers = 2;       // L
  int heads = 2;        // H
  int proto_dim = 64;   // P, projection-head output
  int head_hidden = 64;

  void validate() const;
};

ModelConfig load_model_config(const std::string& path);
void save_model_config(const ModelConfig& cfg, const std::string& path);

enum class CaptureMode { None, ClsRows, Full };

// Per-participant CLS-row attention capture, sliced out of the batched
// sink. a[l][h] is a distribution over (CLS + N patch positions).
struct AttentionCapture {
  int layers = 0, heads = 0, seq = 0;
  std::vector<std::vector<std::vector<double>>> cls_rows;  // [l][h][seq]
  std::vector<std::vector<double>> full;                   // [l][seq*seq] head-averaged
  bool has_full = false;
};

// The encoder: per-organ cross-attention tokenizer, availability-aware
// sequence assembly with learnable mask/organ-ID embeddings, pre-norm
// transformer blocks with a CLS token, and the weight-normalized
// projection head producing prototype logits.
class PanModel {
 public:
  PanModel(const OrganSchema& schema, const ModelConfig& cfg, uint64_t init_seed);
  // parameter handles alias the store; deep copies go through clone()
  PanModel(const PanModel&) = delete;
  PanModel& operator=(const PanModel&) = delete;
  PanModel(PanModel&&) = default;
  PanModel& operator=(PanModel&&) = default;

  const OrganSchema& schema() const { return schema_; }
  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Compresses one organ's feature vector into K_o tokens of width d via
  // cross-attention with learnable queries (single head, d_head = d).
  Tensor cape_encode(const std::vector<double>& features, int organ) const;

  // Builds one participant sequence [(N+1) x d]: CLS first, then per organ
  // either tokens + organ embedding or mask token + organ embedding.
  // masked marks available organs additionally masked for the student
  // view; masked[o] for an unavailable organ is a contract violation.
  Tensor assemble_sequence(const std::vector<std::optional<std::vector<double>>>& organs,
                           const std::vector<uint8_t>& masked) const;

  struct Forward {
    Tensor cls;       // [B x d] post-final-norm CLS rows
    Tensor tokens;    // [B*(N+1) x d] post-final-norm full sequences
    AttentionCaptureBatch capture;
  };

  // Batched forward over B participants. masked may be empty (no extra
  // masking anywhere).
  Forward forward_batch(const std::vector<const ParticipantRecord*>& batch,
                        const std::vector<std::vector<uint8_t>>& masked,
                        CaptureMode capture = CaptureMode::None) const;

  // Transformer block stack only (no final norm); exposed for tests.
  Tensor run_blocks(const Tensor& seq, int batch, AttentionCaptureBatch* capture = nullptr) const;
  Tensor final_norm(const Tensor& x) const;

  // Projection head on CLS rows [B x d] -> prototype logits [B x P]. When
  // frozen, no gradient reaches the final (weight-normalized) layer.
  Tensor project_head(const Tensor& cls) const;
  void set_head_frozen(bool frozen) { head_frozen_ = frozen; }
  bool head_frozen() const { return head_frozen_; }
  // Row-normalized prototype matrix [P x hidden]; rows have unit norm.
  Tensor normalized_prototypes() const;

  PanModel clone() const;

  static AttentionCapture slice_capture(const AttentionCaptureBatch& batch_capture, int b);

 private:
  struct Cape {
    Tensor emb_w, emb_b;  // [D_o x d] each
    Tensor queries;       // [K_o x d]
    Tensor wq, wk, wv;    // [d x d]
  };
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };

  OrganSchema schema_;
  ModelConfig cfg_;
  ParameterStore params_;
  std::vector<Cape> cape_;
  std::vector<Tensor> mask_tok_;  // [d] per organ
  std::vector<Tensor> organ_emb_; // [K_o x d] per organ
  Tensor cls_emb_;                // [d]
  std::vector<Block> blocks_;
  Tensor final_g_, final_b_;
  Tensor head_w1_, head_b1_, head_w2_, head_b2_, head_w3_;  // w3 [P x hidden]
  bool head_frozen_ = false;
};

}  // namespace panfm
