#pragma once

#include <cstddef>

namespace panfm::kernels {

// Dense row-major matrix kernels. Each has a serial reference version and
// an OpenMP version parallelized over output rows. Every output element is
// written by exactly one thread with a fixed summation order, so results
// are bitwise identical for any thread count; tests and the kernel
// benchmark compare the two directly.
//
// Accumulating variants (*_acc) add into C instead of overwriting — used
// by backward passes that sum gradients.

// C = A[m x k] * B[k x n]
void matmul_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_omp(const double* a, const double* b, double* c, int m, int k, int n);

// C += A[m x k] * B[k x n]
void matmul_acc_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_acc_omp(const double* a, const double* b, double* c, int m, int k, int n);

// C += A[m x k] * B[n x k]^T  (i.e. A * B^T)
void matmul_nt_acc_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt_acc_omp(const double* a, const double* b, double* c, int m, int k, int n);

// C += A[k x m]^T * B[k x n]  (i.e. A^T * B)
void matmul_tn_acc_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn_acc_omp(const double* a, const double* b, double* c, int m, int k, int n);

// Dispatchers: route to the OpenMP kernel when the product m*k*n crosses
// a size threshold, serial otherwise. Both sides are bit-identical, so the
// routing never changes results.
void matmul(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n);

}  // namespace panfm::kernels
