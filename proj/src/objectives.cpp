#include "panfm/objectives.hpp"

#include <cmath>

#include "panfm/util.hpp"

namespace panfm {

Tensor dino_global_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                        const std::vector<double>& center, double student_temp,
                        double teacher_temp) {
  PF_CHECK(!teacher_logits.requires_grad(), "dino_global_loss: teacher side must be detached");
  PF_CHECK(student_logits.shape() == teacher_logits.shape() && student_logits.rank() == 2,
           "dino_global_loss: logit shapes disagree");
  const int B = student_logits.shape()[0], P = student_logits.shape()[1];
  PF_CHECK(static_cast<int>(center.size()) == P, "dino_global_loss: center width ",
           center.size(), " != prototype dim ", P);
  PF_CHECK(student_temp > 0.0 && teacher_temp > 0.0, "dino_global_loss: temperatures must be > 0");

  // teacher targets: softmax((t - center) / tau_t), computed as constants
  std::vector<double> targets(static_cast<size_t>(B) * P);
  for (int i = 0; i < B; ++i) {
    double mx = -1e300;
    for (int j = 0; j < P; ++j) {
      const double v = (teacher_logits.data()[static_cast<size_t>(i) * P + j] - center[j]) /
                       teacher_temp;
      targets[static_cast<size_t>(i) * P + j] = v;
      mx = std::max(mx, v);
    }
    double z = 0.0;
    for (int j = 0; j < P; ++j) {
      auto& v = targets[static_cast<size_t>(i) * P + j];
      v = std::exp(v - mx);
      z += v;
    }
    for (int j = 0; j < P; ++j) targets[static_cast<size_t>(i) * P + j] /= z;
  }
  Tensor t = Tensor::from_data({B, P}, std::move(targets));
  Tensor s = log_softmax_rows(mul_scalar(student_logits, 1.0 / student_temp));
  return mul_scalar(sum_all(mul(t, s)), -1.0 / B);
}

void update_center(std::vector<double>& center, const Tensor& teacher_logits, double momentum) {
  PF_CHECK(momentum >= 0.0 && momentum <= 1.0, "update_center: momentum must be in [0, 1]");
  PF_CHECK(teacher_logits.rank() == 2 &&
               teacher_logits.shape()[1] == static_cast<int>(center.size()),
           "update_center: logit width mismatch");
  const int B = teacher_logits.shape()[0], P = teacher_logits.shape()[1];
  for (int j = 0; j < P; ++j) {
    double mean = 0.0;
    for (int i = 0; i < B; ++i) mean += teacher_logits.data()[static_cast<size_t>(i) * P + j];
    mean /= B;
    center[j] = momentum * center[j] + (1.0 - momentum) * mean;
  }
}

Tensor ntxent_loss(const Tensor& z1, const Tensor& z2, double temp) {
  PF_CHECK(z1.shape() == z2.shape() && z1.rank() == 2, "ntxent_loss: view shapes disagree");
  const int B = z1.shape()[0];
  PF_CHECK(B >= 2, "ntxent_loss: batch must be >= 2");
  PF_CHECK(temp > 0.0, "ntxent_loss: temperature must be > 0");
  const int n = 2 * B;
  Tensor z = l2_normalize_rows(concat_rows({z1, z2}));
  Tensor sim = mul_scalar(matmul(z, transpose(z)), 1.0 / temp);

  std::vector<double> diag_mask(static_cast<size_t>(n) * n, 0.0);
  std::vector<double> pos_mask(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    diag_mask[static_cast<size_t>(i) * n + i] = -1e30;
    const int pos = i < B ? i + B : i - B;
    pos_mask[static_cast<size_t>(i) * n + pos] = 1.0;
  }
  Tensor lse = logsumexp_rows(add(sim, Tensor::from_data({n, n}, std::move(diag_mask))));
  Tensor pos = row_sum(mul(sim, Tensor::from_data({n, n}, std::move(pos_mask))));
  return mean_all(sub(lse, pos));
}

namespace {

// per-feature centered view and its (ddof = 1) variance
struct Centered {
  Tensor xc;
  Tensor var;
};

Centered center_view(const Tensor& z) {
  const int B = z.shape()[0];
  Tensor mu = col_mean(z);
  Tensor xc = sub(z, broadcast_row(mu, B));
  Tensor var = mul_scalar(col_sum(square(xc)), 1.0 / (B - 1));
  return {xc, var};
}

}  // namespace

Tensor vicreg_loss(const Tensor& z1, const Tensor& z2, double mu, double nu, double xi,
                   double gamma_hinge) {
  PF_CHECK(z1.shape() == z2.shape() && z1.rank() == 2, "vicreg_loss: view shapes disagree");
  const int B = z1.shape()[0], q = z1.shape()[1];
  PF_CHECK(B >= 2, "vicreg_loss: batch must be >= 2");

  Tensor inv = mean_all(square(sub(z1, z2)));

  std::vector<double> offdiag(static_cast<size_t>(q) * q, 1.0);
  for (int i = 0; i < q; ++i) offdiag[static_cast<size_t>(i) * q + i] = 0.0;
  Tensor off_mask = Tensor::from_data({q, q}, std::move(offdiag));

  Tensor var_term = Tensor::scalar(0.0);
  Tensor cov_term = Tensor::scalar(0.0);
  for (const Tensor* z : {&z1, &z2}) {
    auto [xc, var] = center_view(*z);
    Tensor sd = sqrt(add_scalar(var, 1e-4));
    var_term = add(var_term, mean_all(relu(add_scalar(neg(sd), gamma_hinge))));
    Tensor cov = mul_scalar(matmul(transpose(xc), xc), 1.0 / (B - 1));
    cov_term = add(cov_term, mul_scalar(sum_all(mul(square(cov), off_mask)), 1.0 / q));
  }
  var_term = mul_scalar(var_term, 0.5);

  return add(add(mul_scalar(inv, mu), mul_scalar(var_term, nu)), mul_scalar(cov_term, xi));
}

Tensor barlow_loss(const Tensor& z1, const Tensor& z2, double lambda_off) {
  PF_CHECK(z1.shape() == z2.shape() && z1.rank() == 2, "barlow_loss: view shapes disagree");
  const int B = z1.shape()[0], q = z1.shape()[1];
  PF_CHECK(B >= 2, "barlow_loss: batch must be >= 2");

  // population-std standardization so identical views give C_ii = 1 exactly
  auto standardize = [&](const Tensor& z) {
    Tensor mu = col_mean(z);
    Tensor xc = sub(z, broadcast_row(mu, B));
    Tensor var = col_mean(square(xc));
    for (double v : var.data())
      if (v < 1e-16) {
        log_warn("barlow_loss: zero-variance feature, standardization floored");
        break;
      }
    Tensor sd = sqrt(clamp_min(var, 1e-16));
    return div_rowvec(xc, sd);
  };
  Tensor c = mul_scalar(matmul(transpose(standardize(z1)), standardize(z2)), 1.0 / B);

  std::vector<double> eye(static_cast<size_t>(q) * q, 0.0);
  std::vector<double> diag_mask(static_cast<size_t>(q) * q, 0.0);
  std::vector<double> offdiag(static_cast<size_t>(q) * q, 1.0);
  for (int i = 0; i < q; ++i) {
    eye[static_cast<size_t>(i) * q + i] = 1.0;
    diag_mask[static_cast<size_t>(i) * q + i] = 1.0;
    offdiag[static_cast<size_t>(i) * q + i] = 0.0;
  }
  Tensor diag_term = sum_all(mul(square(sub(c, Tensor::from_data({q, q}, std::move(eye)))),
                                 Tensor::from_data({q, q}, std::move(diag_mask))));
  Tensor off_term = sum_all(mul(square(c), Tensor::from_data({q, q}, std::move(offdiag))));
  return add(diag_term, mul_scalar(off_term, lambda_off));
}

Tensor focal_loss(const Tensor& logits, const std::vector<int>& labels, double alpha,
                  double gamma) {
  PF_CHECK(logits.rank() == 1, "focal_loss: rank-1 logits expected");
  const int B = logits.shape()[0];
  PF_CHECK(B == static_cast<int>(labels.size()), "focal_loss: label count mismatch");
  PF_CHECK(alpha > 0.0 && alpha < 1.0, "focal_loss: alpha must be in (0, 1)");
  PF_CHECK(gamma >= 0.0, "focal_loss: gamma must be >= 0");
  std::vector<double> y(B), ny(B);
  for (int i = 0; i < B; ++i) {
    PF_CHECK(labels[i] == 0 || labels[i] == 1, "focal_loss: labels must be 0/1");
    y[i] = labels[i];
    ny[i] = 1.0 - labels[i];
  }
  Tensor yc = Tensor::from_data({B}, std::move(y));
  Tensor nyc = Tensor::from_data({B}, std::move(ny));
  Tensor p = sigmoid(logits);
  Tensor omp = add_scalar(neg(p), 1.0);
  Tensor pos = mul_scalar(mul(pow_scalar(omp, gamma), log(p)), -alpha);
  Tensor neg_t = mul_scalar(mul(pow_scalar(p, gamma), log(omp)), -(1.0 - alpha));
  return mean_all(add(mul(pos, yc), mul(neg_t, nyc)));
}

}  // namespace panfm
