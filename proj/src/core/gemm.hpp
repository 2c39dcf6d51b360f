#pragma once

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <cstddef>
#include <type_traits>

#ifdef SSGAN_USE_OPENBLAS
#include <cblas.h>
#endif

namespace ssgan::detail {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// All products go through one entry point so the backend is a build-time
// swap: OpenBLAS when available, Eigen otherwise. Forced to one BLAS thread —
// results must be reproducible run to run, and a checkpointed run resumed on
// the same machine must replay bit-identically.
template <typename S>
void gemm_dispatch(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const S* a,
                   std::size_t lda, const S* b, std::size_t ldb, S beta, S* c) {
#ifdef SSGAN_USE_OPENBLAS
  if constexpr (std::is_same_v<S, float> || std::is_same_v<S, double>) {
    static const bool single_thread = [] {
      openblas_set_num_threads(1);
      return true;
    }();
    (void)single_thread;
    const auto opa = ta ? CblasTrans : CblasNoTrans;
    const auto opb = tb ? CblasTrans : CblasNoTrans;
    if constexpr (std::is_same_v<S, float>)
      cblas_sgemm(CblasRowMajor, opa, opb, static_cast<int>(m), static_cast<int>(n),
                  static_cast<int>(k), 1.0f, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                  beta, c, static_cast<int>(n));
    else
      cblas_dgemm(CblasRowMajor, opa, opb, static_cast<int>(m), static_cast<int>(n),
                  static_cast<int>(k), 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                  beta, c, static_cast<int>(n));
    return;
  }
#endif
  const auto am = [&] {
    return ta ? ConstMatMap<S>(a, k, m) : ConstMatMap<S>(a, m, k);
  }();
  const auto bm = [&] {
    return tb ? ConstMatMap<S>(b, n, k) : ConstMatMap<S>(b, k, n);
  }();
  MatMap<S> cm(c, m, n);
  if (beta == S(0)) {
    if (ta)
      cm.noalias() = am.transpose() * bm;
    else if (tb)
      cm.noalias() = am * bm.transpose();
    else
      cm.noalias() = am * bm;
  } else {
    if (ta)
      cm.noalias() += am.transpose() * bm;
    else if (tb)
      cm.noalias() += am * bm.transpose();
    else
      cm.noalias() += am * bm;
  }
}

/// c[M,N] = a[M,K] * b[K,N], row-major buffers.
template <typename S>
void gemm(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_dispatch<S>(false, false, m, n, k, a, k, b, n, S(0), c);
}

/// c[M,N] += a[M,K] * b[K,N]
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_dispatch<S>(false, false, m, n, k, a, k, b, n, S(1), c);
}

/// c[M,N] = a[M,K] * b[N,K]^T
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_dispatch<S>(false, true, m, n, k, a, k, b, k, S(0), c);
}

/// c[M,N] += a[M,K] * b[N,K]^T
template <typename S>
void gemm_nt_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_dispatch<S>(false, true, m, n, k, a, k, b, k, S(1), c);
}

/// c[M,N] = a[K,M]^T * b[K,N]
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_dispatch<S>(true, false, m, n, k, a, m, b, n, S(0), c);
}

/// c[M,N] += a[K,M]^T * b[K,N]
template <typename S>
void gemm_tn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_dispatch<S>(true, false, m, n, k, a, m, b, n, S(1), c);
}

/// y = tanh(x), elementwise over n values. Eigen's array kernel is SIMD for
/// float, which matters: this sits on the generator's full-resolution output.
template <typename S>
void array_tanh(const S* x, S* y, std::size_t n) {
  Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xm(x, static_cast<Eigen::Index>(n));
  Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> ym(y, static_cast<Eigen::Index>(n));
  ym = xm.tanh();
}

}  // namespace ssgan::detail
