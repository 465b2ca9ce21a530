#include "panfm/kernels.hpp"

namespace panfm::kernels {

namespace {

// One output row of C (+)= A_row * B. k-outer / j-inner keeps column access
// contiguous and lets the compiler vectorize the j loop.
inline void row_mm(const double* arow, const double* b, double* crow, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const double av = arow[p];
    const double* brow = b + static_cast<size_t>(p) * n;
    for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void row_mm_nt(const double* arow, const double* b, double* crow, int k, int n) {
  for (int j = 0; j < n; ++j) {
    const double* brow = b + static_cast<size_t>(j) * k;
    double acc = 0.0;
    for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
    crow[j] += acc;
  }
}

constexpr long long kParallelThreshold = 1 << 16;

}  // namespace

void matmul_serial(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = 0.0;
    row_mm(a + static_cast<size_t>(i) * k, b, crow, k, n);
  }
}

void matmul_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = 0.0;
    row_mm(a + static_cast<size_t>(i) * k, b, crow, k, n);
  }
}

void matmul_acc_serial(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    row_mm(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, k, n);
}

void matmul_acc_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    row_mm(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, k, n);
}

void matmul_nt_acc_serial(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    row_mm_nt(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, k, n);
}

void matmul_nt_acc_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    row_mm_nt(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, k, n);
}

void matmul_tn_acc_serial(const double* a, const double* b, double* c, int m, int k, int n) {
  // C[m x n] += A[k x m]^T B[k x n]; row i of C reads column i of A.
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<size_t>(p) * m + i];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_tn_acc_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<size_t>(p) * m + i];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  if (static_cast<long long>(m) * k * n >= kParallelThreshold && m > 1)
    matmul_omp(a, b, c, m, k, n);
  else
    matmul_serial(a, b, c, m, k, n);
}

void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  if (static_cast<long long>(m) * k * n >= kParallelThreshold && m > 1)
    matmul_acc_omp(a, b, c, m, k, n);
  else
    matmul_acc_serial(a, b, c, m, k, n);
}

void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  if (static_cast<long long>(m) * k * n >= kParallelThreshold && m > 1)
    matmul_nt_acc_omp(a, b, c, m, k, n);
  else
    matmul_nt_acc_serial(a, b, c, m, k, n);
}

void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  if (static_cast<long long>(m) * k * n >= kParallelThreshold && m > 1)
    matmul_tn_acc_omp(a, b, c, m, k, n);
  else
    matmul_tn_acc_serial(a, b, c, m, k, n);
}

}  // namespace panfm::kernels
