#include "panfm/sgm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "panfm/util.hpp"

namespace panfm {

SaliencyProxy parse_proxy(const std::string& s) {
  if (s == "a1" || s == "A1" || s == "last") return SaliencyProxy::LastLayer;
  if (s == "a2" || s == "A2" || s == "avg") return SaliencyProxy::AllLayerAverage;
  if (s == "a3" || s == "A3" || s == "rollout") return SaliencyProxy::Rollout;
  fail(msg("unknown saliency proxy '", s, "' (expected a1|a2|a3)"));
}

std::string proxy_name(SaliencyProxy p) {
  switch (p) {
    case SaliencyProxy::LastLayer: return "a1";
    case SaliencyProxy::AllLayerAverage: return "a2";
    case SaliencyProxy::Rollout: return "a3";
  }
  return "?";
}

namespace {

// mean CLS row over the requested layers/heads; entry 0 is CLS self-attention
std::vector<double> averaged_cls_row(const AttentionCapture& c, int first_layer) {
  std::vector<double> row(static_cast<size_t>(c.seq), 0.0);
  int count = 0;
  for (int l = first_layer; l < c.layers; ++l)
    for (int h = 0; h < c.heads; ++h) {
      PF_CHECK(static_cast<int>(c.cls_rows[l][h].size()) == c.seq,
               "organ_saliency: capture row width mismatch");
      for (int j = 0; j < c.seq; ++j) row[j] += c.cls_rows[l][h][j];
      ++count;
    }
  for (auto& v : row) v /= count;
  return row;
}

// attention rollout: R = A~_L ... A~_1 with A~ = 0.5 A-bar + 0.5 I
std::vector<double> rollout_cls_row(const AttentionCapture& c) {
  PF_CHECK(c.has_full, "organ_saliency: rollout proxy requires full-matrix capture");
  const int S = c.seq;
  std::vector<double> r(static_cast<size_t>(S) * S, 0.0);
  for (int i = 0; i < S; ++i) r[static_cast<size_t>(i) * S + i] = 1.0;
  std::vector<double> next(static_cast<size_t>(S) * S);
  for (int l = 0; l < c.layers; ++l) {
    const auto& a = c.full[l];
    PF_CHECK(static_cast<int>(a.size()) == S * S, "organ_saliency: full capture size mismatch");
    // next = A~_l * r  (layers applied bottom-up keeps top layer leftmost)
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j) {
        double acc = 0.0;
        for (int k = 0; k < S; ++k) {
          const double at = 0.5 * a[static_cast<size_t>(i) * S + k] + (i == k ? 0.5 : 0.0);
          acc += at * r[static_cast<size_t>(k) * S + j];
        }
        next[static_cast<size_t>(i) * S + j] = acc;
      }
    std::swap(r, next);
  }
  return {r.begin(), r.begin() + S};  // CLS row
}

}  // namespace

std::vector<double> organ_saliency(const AttentionCapture& capture, const OrganSchema& schema,
                                   const std::vector<uint8_t>& availability, SaliencyProxy proxy,
                                   double* cls_self_mass) {
  PF_CHECK(capture.seq == schema.total_tokens() + 1,
           "organ_saliency: capture length ", capture.seq, " does not match schema (",
           schema.total_tokens() + 1, ")");
  PF_CHECK(static_cast<int>(availability.size()) == schema.organ_count(),
           "organ_saliency: availability width mismatch");
  std::vector<double> row;
  switch (proxy) {
    case SaliencyProxy::LastLayer: row = averaged_cls_row(capture, capture.layers - 1); break;
    case SaliencyProxy::AllLayerAverage: row = averaged_cls_row(capture, 0); break;
    case SaliencyProxy::Rollout: row = rollout_cls_row(capture); break;
  }
  if (cls_self_mass) *cls_self_mass = row[0];
  std::vector<double> s(schema.organ_count());
  for (int o = 0; o < schema.organ_count(); ++o) {
    if (!availability[o]) {
      s[o] = -std::numeric_limits<double>::infinity();
      continue;
    }
    auto [b, e] = schema.span(o);
    double acc = 0.0;
    for (int j = b; j < e; ++j) acc += row[1 + j];  // patch positions only
    s[o] = acc;
  }
  return s;
}

std::vector<double> masking_distribution(const std::vector<double>& saliency,
                                         const std::vector<uint8_t>& availability, double tau) {
  PF_CHECK(tau > 0.0, "masking_distribution: tau must be positive, got ", tau);
  PF_CHECK(saliency.size() == availability.size(), "masking_distribution: size mismatch");
  const int O = static_cast<int>(saliency.size());
  int n_avail = 0;
  double mx = -std::numeric_limits<double>::infinity();
  for (int o = 0; o < O; ++o) {
    if (!availability[o]) continue;
    PF_CHECK(std::isfinite(saliency[o]), "masking_distribution: non-finite saliency on available organ");
    ++n_avail;
    mx = std::max(mx, saliency[o]);
  }
  PF_CHECK(n_avail >= 1, "masking_distribution: at least one organ must be available");
  std::vector<double> p(O, 0.0);
  double z = 0.0;
  for (int o = 0; o < O; ++o) {
    if (!availability[o]) continue;
    p[o] = std::exp((saliency[o] - mx) / tau);
    z += p[o];
  }
  for (int o = 0; o < O; ++o)
    if (availability[o]) p[o] /= z;
  return p;
}

int sample_mask_budget(int n_avail, double r_mask, RngStream& rng) {
  PF_CHECK(n_avail >= 1, "sample_mask_budget: n_avail must be >= 1");
  PF_CHECK(r_mask > 0.0 && r_mask < 1.0, "sample_mask_budget: r_mask must be in (0, 1), got ",
           r_mask);
  const int n_max = std::min(static_cast<int>(std::floor(n_avail * r_mask)), n_avail - 1);
  if (n_max < 1) return 0;
  return static_cast<int>(rng.uniform_range(1, n_max));
}

std::vector<int> sample_mask_set(std::vector<double> probs, int n_mask, RngStream& rng) {
  std::vector<int> mask;
  for (int draw = 0; draw < n_mask; ++draw) {
    double total = 0.0;
    for (double p : probs) total += p;
    if (total <= 0.0) break;  // positive support exhausted
    const double u = rng.u01() * total;
    double cum = 0.0;
    int chosen = -1;
    for (size_t o = 0; o < probs.size(); ++o) {
      if (probs[o] <= 0.0) continue;
      cum += probs[o];
      if (u < cum) {
        chosen = static_cast<int>(o);
        break;
      }
    }
    if (chosen < 0) {  // numeric edge: u == total
      for (int o = static_cast<int>(probs.size()) - 1; o >= 0; --o)
        if (probs[o] > 0.0) {
          chosen = o;
          break;
        }
    }
    mask.push_back(chosen);
    probs[chosen] = 0.0;
  }
  std::sort(mask.begin(), mask.end());
  return mask;
}

std::vector<int> random_mask_set(const std::vector<uint8_t>& availability, double r_mask,
                                 RngStream& rng) {
  int n_avail = 0;
  for (uint8_t a : availability) n_avail += a ? 1 : 0;
  const int n_mask = sample_mask_budget(n_avail, r_mask, rng);
  if (n_mask == 0) return {};
  std::vector<double> uniform(availability.size(), 0.0);
  for (size_t o = 0; o < availability.size(); ++o)
    if (availability[o]) uniform[o] = 1.0 / n_avail;
  return sample_mask_set(std::move(uniform), n_mask, rng);
}

SaliencyReport saliency_report(const AttentionCapture& capture, const OrganSchema& schema,
                               const std::vector<uint8_t>& availability, SaliencyProxy proxy,
                               double tau) {
  SaliencyReport rep;
  rep.proxy = proxy;
  rep.tau = tau;
  rep.saliency = organ_saliency(capture, schema, availability, proxy, &rep.cls_self_mass);
  rep.mask_prob = masking_distribution(rep.saliency, availability, tau);
  return rep;
}

}  // namespace panfm
