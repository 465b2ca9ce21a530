#pragma once

#include <vector>

#include "panfm/tensor.hpp"

namespace panfm {

// Self-distillation global alignment: teacher rows are softened with
// centering and teacher temperature, the student is scored by
// cross-entropy at student temperature. Single direction: full-view
// teacher -> masked-view student. teacher_logits must be detached.
Tensor dino_global_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                        const std::vector<double>& center, double student_temp,
                        double teacher_temp);

// center <- momentum * center + (1 - momentum) * batch-mean(teacher_logits)
void update_center(std::vector<double>& center, const Tensor& teacher_logits, double momentum);

// Normalized-temperature cross entropy over 2B anchors; positives are the
// cross-view pairs, negatives everything else in the batch.
Tensor ntxent_loss(const Tensor& z1, const Tensor& z2, double temp);

// Invariance (MSE) + per-feature variance hinge + off-diagonal covariance
// penalty, variance and covariance averaged over the two views.
Tensor vicreg_loss(const Tensor& z1, const Tensor& z2, double mu, double nu, double xi,
                   double gamma_hinge);

// Cross-correlation of per-feature standardized views pushed toward the
// identity; off-diagonals weighted by lambda_off.
Tensor barlow_loss(const Tensor& z1, const Tensor& z2, double lambda_off);

// Class-weighted, confidence-down-weighted binary cross entropy on raw
// logits (rank-1 [B]); labels in {0,1}; batch mean.
Tensor focal_loss(const Tensor& logits, const std::vector<int>& labels, double alpha,
                  double gamma);

}  // namespace panfm
