#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "panfm/model.hpp"
#include "panfm/rng.hpp"
#include "panfm/schema.hpp"

namespace panfm {

// Saliency-Guided Masking: teacher attention -> per-organ saliency ->
// temperature softmax over available organs -> budgeted without-replacement
// mask sample. The uniform-random baseline shares the budget logic and
// differs only in the selection distribution.

enum class SaliencyProxy {
  LastLayer,        // A1: final block's CLS row, head-averaged
  AllLayerAverage,  // A2 (default): CLS rows averaged over all blocks/heads
  Rollout           // A3: attention rollout, needs full-matrix capture
};

SaliencyProxy parse_proxy(const std::string& s);
std::string proxy_name(SaliencyProxy p);

struct SaliencyReport {
  // Per-organ attention mass on the organ's token span. Unavailable organs
  // carry the -inf sentinel; the sentinel is realized by excluding them
  // from the softmax, never by arithmetic on non-finite values.
  std::vector<double> saliency;
  std::vector<double> mask_prob;  // exactly 0 on unavailable organs, sums to 1
  double cls_self_mass = 0.0;
  SaliencyProxy proxy = SaliencyProxy::AllLayerAverage;
  double tau = 0.0;
};

// Per-organ saliency from a captured teacher pass. For A1/A2 the CLS row is
// a distribution over CLS + patches, so sum_o S_o + cls_self_mass = 1 when
// every organ is available. A3 multiplies residual-adjusted head-averaged
// matrices (top layer first) and reads the CLS row of the product; it
// requires full-matrix capture.
std::vector<double> organ_saliency(const AttentionCapture& capture, const OrganSchema& schema,
                                   const std::vector<uint8_t>& availability, SaliencyProxy proxy,
                                   double* cls_self_mass = nullptr);

// P_o = exp(S_o / tau) / sum_{k available} exp(S_k / tau), computed with
// max-subtraction over the available subset; exactly 0 elsewhere.
std::vector<double> masking_distribution(const std::vector<double>& saliency,
                                         const std::vector<uint8_t>& availability, double tau);

// n_max = min(floor(n_avail * r_mask), n_avail - 1); n_mask uniform on
// {1..n_max}, or 0 when no masking is possible (n_avail == 1).
int sample_mask_budget(int n_avail, double r_mask, RngStream& rng);

// Sequential without-replacement (Plackett-Luce) sampling: draw an organ
// proportional to the current probabilities, zero it, renormalize, repeat.
// Stops early if positive-support organs run out.
std::vector<int> sample_mask_set(std::vector<double> probs, int n_mask, RngStream& rng);

// Uniform baseline: same budget, uniform selection over available organs.
std::vector<int> random_mask_set(const std::vector<uint8_t>& availability, double r_mask,
                                 RngStream& rng);

// Full SGM report for one participant.
SaliencyReport saliency_report(const AttentionCapture& capture, const OrganSchema& schema,
                               const std::vector<uint8_t>& availability, SaliencyProxy proxy,
                               double tau);

}  // namespace panfm
