#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "dmpo/common.hpp"

namespace dmpo::kernels {

// Reference semantics: C[i,j] = sum over t, ascending, of A[i,t]*B[t,j].
// The accelerated backend must agree with this within 1e-12 relative error
// (it is validated against the reference in the test suite); the reference
// backend is bitwise-reproducible against an independent triple loop.
enum class Backend { Fast, Reference };

inline Backend& backend() {
  static Backend b = Backend::Fast;
  return b;
}

inline void set_backend(Backend b) { backend() = b; }

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

// C[m,n] += or = A[m,k] * B[k,n], row-major, ascending-t accumulation per
// output element.
inline void gemm_ref(const double* a, const double* b, double* c, std::int64_t m,
                     std::int64_t k, std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* cr = c + i * n;
    if (!accumulate) {
      for (std::int64_t j = 0; j < n; ++j) cr[j] = 0.0;
    }
    const double* ar = a + i * k;
    for (std::int64_t t = 0; t < k; ++t) {
      const double av = ar[t];
      const double* br = b + t * n;
      for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C = A^T * B with A[k,m], B[k,n]; accumulation ascending in t.
inline void gemm_tn_ref(const double* a, const double* b, double* c, std::int64_t m,
                        std::int64_t k, std::int64_t n, bool accumulate) {
  if (!accumulate) {
    for (std::int64_t i = 0; i < m * n; ++i) c[i] = 0.0;
  }
  for (std::int64_t t = 0; t < k; ++t) {
    const double* ar = a + t * m;
    const double* br = b + t * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = ar[i];
      double* cr = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C = A * B^T with A[m,k], B[n,k].
inline void gemm_nt_ref(const double* a, const double* b, double* c, std::int64_t m,
                        std::int64_t k, std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    double* cr = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* br = b + j * k;
      double acc = 0.0;
      for (std::int64_t t = 0; t < k; ++t) acc += ar[t] * br[t];
      cr[j] = accumulate ? cr[j] + acc : acc;
    }
  }
}

// Single-slice dispatchers.
constexpr std::int64_t kSmallProduct = 1 << 14;

inline void gemm_nn(const double* a, const double* b, double* c, std::int64_t m,
                    std::int64_t k, std::int64_t n, bool accumulate = false) {
  if (backend() == Backend::Reference || m * k * n < kSmallProduct) {
    gemm_ref(a, b, c, m, k, n, accumulate);
    return;
  }
  CMap am(a, m, k), bm(b, k, n);
  MMap cm(c, m, n);
  if (accumulate)
    cm.noalias() += am * bm;
  else
    cm.noalias() = am * bm;
}

inline void gemm_tn(const double* a, const double* b, double* c, std::int64_t m,
                    std::int64_t k, std::int64_t n, bool accumulate = false) {
  if (backend() == Backend::Reference || m * k * n < kSmallProduct) {
    gemm_tn_ref(a, b, c, m, k, n, accumulate);
    return;
  }
  CMap am(a, k, m), bm(b, k, n);
  MMap cm(c, m, n);
  if (accumulate)
    cm.noalias() += am.transpose() * bm;
  else
    cm.noalias() = am.transpose() * bm;
}

inline void gemm_nt(const double* a, const double* b, double* c, std::int64_t m,
                    std::int64_t k, std::int64_t n, bool accumulate = false) {
  if (backend() == Backend::Reference || m * k * n < kSmallProduct) {
    gemm_nt_ref(a, b, c, m, k, n, accumulate);
    return;
  }
  CMap am(a, m, k), bm(b, n, k);
  MMap cm(c, m, n);
  if (accumulate)
    cm.noalias() += am * bm.transpose();
  else
    cm.noalias() = am * bm.transpose();
}

// Row-parallel GEMM for the large activation-by-weight products. Fixed
// 64-row chunks keep results identical for any thread count.
inline void gemm_nn_par(const double* a, const double* b, double* c, std::int64_t m,
                        std::int64_t k, std::int64_t n) {
  if (m * k * n < (1 << 18)) {
    gemm_nn(a, b, c, m, k, n);
    return;
  }
  parallel_for(m, 64, [&](std::int64_t r0, std::int64_t r1) {
    gemm_nn(a + r0 * k, b, c + r0 * n, r1 - r0, k, n);
  });
}

inline void gemm_nt_par(const double* a, const double* b, double* c, std::int64_t m,
                        std::int64_t k, std::int64_t n) {
  if (m * k * n < (1 << 18)) {
    gemm_nt(a, b, c, m, k, n);
    return;
  }
  parallel_for(m, 64, [&](std::int64_t r0, std::int64_t r1) {
    gemm_nt(a + r0 * k, b, c + r0 * n, r1 - r0, k, n);
  });
}

// C[m,n] += A[m,k] * B^T with B [n,k]; row-parallel.
inline void gemm_nt_acc_par(const double* a, const double* b, double* c, std::int64_t m,
                            std::int64_t k, std::int64_t n) {
  if (m * k * n < (1 << 18)) {
    gemm_nt(a, b, c, m, k, n, true);
    return;
  }
  parallel_for(m, 64, [&](std::int64_t r0, std::int64_t r1) {
    gemm_nt(a + r0 * k, b, c + r0 * n, r1 - r0, k, n, true);
  });
}

// C[m,n] += A^T * B with A [k,m], B [k,n]; column-parallel so each output
// element keeps its ascending-t accumulation on a single thread.
inline void gemm_tn_acc_par(const double* a, const double* b, double* c, std::int64_t m,
                            std::int64_t k, std::int64_t n) {
  if (backend() == Backend::Reference || m * k * n < (1 << 18)) {
    gemm_tn(a, b, c, m, k, n, true);
    return;
  }
  parallel_for(n, 32, [&](std::int64_t j0, std::int64_t j1) {
    Eigen::Map<const EMat> am(a, k, m);
    Eigen::Map<const EMat, 0, Eigen::OuterStride<>> bm(b + j0, k, j1 - j0,
                                                       Eigen::OuterStride<>(n));
    Eigen::Map<EMat, 0, Eigen::OuterStride<>> cm(c + j0, m, j1 - j0, Eigen::OuterStride<>(n));
    cm.noalias() += am.transpose() * bm;
  });
}

}  // namespace dmpo::kernels
