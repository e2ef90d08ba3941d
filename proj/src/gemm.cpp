#include "fel/gemm.hpp"

#include <algorithm>

namespace fel {

namespace {
// Column block sized so four C rows plus one B row stay cache-resident.
constexpr int kColBlock = 512;
}  // namespace

void gemm_nn(double* __restrict c, const double* __restrict a,
             const double* __restrict b, int m, int k, int n) {
  for (int j0 = 0; j0 < n; j0 += kColBlock) {
    const int jn = std::min(kColBlock, n - j0);
    int i = 0;
    for (; i + 4 <= m; i += 4) {
      double* c0 = c + static_cast<long>(i) * n + j0;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      const double* a0 = a + static_cast<long>(i) * k;
      const double* a1 = a0 + k;
      const double* a2 = a1 + k;
      const double* a3 = a2 + k;
      for (int p = 0; p < k; ++p) {
        const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        const double* bp = b + static_cast<long>(p) * n + j0;
        for (int j = 0; j < jn; ++j) {
          const double bj = bp[j];
          c0[j] += v0 * bj;
          c1[j] += v1 * bj;
          c2[j] += v2 * bj;
          c3[j] += v3 * bj;
        }
      }
    }
    for (; i < m; ++i) {
      double* ci = c + static_cast<long>(i) * n + j0;
      const double* ai = a + static_cast<long>(i) * k;
      for (int p = 0; p < k; ++p) {
        const double av = ai[p];
        const double* bp = b + static_cast<long>(p) * n + j0;
        for (int j = 0; j < jn; ++j) ci[j] += av * bp[j];
      }
    }
  }
}

void gemm_nt(double* __restrict c, const double* __restrict a,
             const double* __restrict b, int m, int k, int n) {
  int i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* a0 = a + static_cast<long>(i) * k;
    const double* a1 = a0 + k;
    double* c0 = c + static_cast<long>(i) * n;
    double* c1 = c0 + n;
    int j = 0;
    for (; j + 2 <= n; j += 2) {
      const double* b0 = b + static_cast<long>(j) * k;
      const double* b1 = b0 + k;
      double s00 = 0.0, s01 = 0.0, s10 = 0.0, s11 = 0.0;
      for (int p = 0; p < k; ++p) {
        const double x0 = a0[p], x1 = a1[p];
        const double y0 = b0[p], y1 = b1[p];
        s00 += x0 * y0;
        s01 += x0 * y1;
        s10 += x1 * y0;
        s11 += x1 * y1;
      }
      c0[j] += s00;
      c0[j + 1] += s01;
      c1[j] += s10;
      c1[j + 1] += s11;
    }
    for (; j < n; ++j) {
      const double* bj = b + static_cast<long>(j) * k;
      double s0 = 0.0, s1 = 0.0;
      for (int p = 0; p < k; ++p) {
        s0 += a0[p] * bj[p];
        s1 += a1[p] * bj[p];
      }
      c0[j] += s0;
      c1[j] += s1;
    }
  }
  for (; i < m; ++i) {
    const double* ai = a + static_cast<long>(i) * k;
    double* ci = c + static_cast<long>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<long>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

void gemm_tn(double* __restrict c, const double* __restrict a,
             const double* __restrict b, int m, int k, int n) {
  for (int j0 = 0; j0 < n; j0 += kColBlock) {
    const int jn = std::min(kColBlock, n - j0);
    int i = 0;
    for (; i + 4 <= m; i += 4) {
      double* c0 = c + static_cast<long>(i) * n + j0;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      for (int p = 0; p < k; ++p) {
        const double* ap = a + static_cast<long>(p) * m + i;
        const double v0 = ap[0], v1 = ap[1], v2 = ap[2], v3 = ap[3];
        const double* bp = b + static_cast<long>(p) * n + j0;
        for (int j = 0; j < jn; ++j) {
          const double bj = bp[j];
          c0[j] += v0 * bj;
          c1[j] += v1 * bj;
          c2[j] += v2 * bj;
          c3[j] += v3 * bj;
        }
      }
    }
    for (; i < m; ++i) {
      double* ci = c + static_cast<long>(i) * n + j0;
      for (int p = 0; p < k; ++p) {
        const double av = a[static_cast<long>(p) * m + i];
        const double* bp = b + static_cast<long>(p) * n + j0;
        for (int j = 0; j < jn; ++j) ci[j] += av * bp[j];
      }
    }
  }
}

}  // namespace fel
