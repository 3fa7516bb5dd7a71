#pragma once

#include <cstddef>
#include <type_traits>

#include <cblas.h>

namespace geopix::ops::detail {

/// C[M,N] = op(A) op(B) + beta C, row-major. op transposes when the flag is set.
template <typename T>
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                 const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "gemm: float or double only");
  if (m == 0 || n == 0) return;
  const auto TA = ta ? CblasTrans : CblasNoTrans, TB = tb ? CblasTrans : CblasNoTrans;
  const auto M = static_cast<blasint>(m), N = static_cast<blasint>(n), K = static_cast<blasint>(k);
  const auto LA = static_cast<blasint>(lda), LB = static_cast<blasint>(ldb), LC = static_cast<blasint>(ldc);
  if constexpr (std::is_same_v<T, float>)
    cblas_sgemm(CblasRowMajor, TA, TB, M, N, K, 1.0f, a, LA, b, LB, beta, c, LC);
  else
    cblas_dgemm(CblasRowMajor, TA, TB, M, N, K, 1.0, a, LA, b, LB, beta, c, LC);
}

}  // namespace geopix::ops::detail
