#pragma once

namespace fel {

// Row-major accumulating matrix kernels. All three add into C, callers zero
// the output beforehand when needed.

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(double* c, const double* a, const double* b, int m, int k, int n);

// C[m x n] += A[m x k] * B[n x k]^T   (dot products over k)
void gemm_nt(double* c, const double* a, const double* b, int m, int k, int n);

// C[m x n] += A[k x m]^T * B[k x n]
void gemm_tn(double* c, const double* a, const double* b, int m, int k, int n);

}  // namespace fel
