#pragma once

#include <vector>

namespace panfm {

// Rank-based (Mann-Whitney) AUROC with half credit for ties; equal to the
// brute-force all-pairs comparison. Throws if only one class is present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// (TPR + TNR) / 2 with the decision threshold at sigmoid(score) >= 0.5,
// i.e. score >= 0. Throws if only one class is present.
double balanced_accuracy(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace panfm
