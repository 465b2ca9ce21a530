#include "panfm/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "panfm/util.hpp"

namespace panfm {

namespace {

void check_two_classes(const std::vector<double>& scores, const std::vector<int>& labels,
                       const char* op) {
  PF_CHECK(scores.size() == labels.size() && !scores.empty(), op,
           ": scores/labels size mismatch or empty");
  int pos = 0, neg = 0;
  for (int l : labels) {
    PF_CHECK(l == 0 || l == 1, op, ": labels must be 0/1");
    (l ? pos : neg)++;
  }
  PF_CHECK(pos > 0 && neg > 0, op, ": both classes must be present (", pos, " positive, ", neg,
           " negative)");
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_two_classes(scores, labels, "auroc");
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // average ranks over tie groups (1-based)
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_pos = 0.0;
  int64_t npos = 0;
  for (size_t k = 0; k < n; ++k)
    if (labels[k]) {
      rank_pos += rank[k];
      ++npos;
    }
  const int64_t nneg = static_cast<int64_t>(n) - npos;
  const double u = rank_pos - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1);
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

double balanced_accuracy(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_two_classes(scores, labels, "balanced_accuracy");
  int64_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= 0.0;  // sigmoid(score) >= 0.5
    if (labels[i])
      (pred ? tp : fn)++;
    else
      (pred ? fp : tn)++;
  }
  const double tpr = static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double tnr = static_cast<double>(tn) / static_cast<double>(tn + fp);
  return 0.5 * (tpr + tnr);
}

}  // namespace panfm
