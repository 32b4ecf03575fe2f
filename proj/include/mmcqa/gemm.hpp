#pragma once

// Row-parallel matrix multiply kernels. Every output row is produced by a
// single thread with a fixed k-order accumulation, so results are bit
// identical for any thread count.

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mmcqa {

inline void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace detail {

constexpr std::size_t kParallelFlops = 1u << 16;

// C[M,N] (+)= A_eff[M,K] * B_eff[K,N], where A_eff = ta ? A^T : A and
// B_eff = tb ? B^T : B refer to the row-major storage of A and B.
template <typename T>
void gemm(T* c, const T* a, const T* b, std::size_t m, std::size_t n, std::size_t k,
          bool ta, bool tb, bool accumulate) {
  const bool parallel = m > 1 && m * n * k >= kParallelFlops;
#ifdef _OPENMP
#pragma omp parallel for if (parallel)
#endif
  for (std::ptrdiff_t is = 0; is < static_cast<std::ptrdiff_t>(m); ++is) {
    const std::size_t i = static_cast<std::size_t>(is);
    T* crow = c + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    }
    if (!tb) {
      // Accumulate scaled rows of B; inner loop contiguous in j.
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = ta ? a[kk * m + i] : a[i * k + kk];
        if (av == T(0)) continue;
        const T* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    } else {
      // B stored [N,K]; dot products, inner loop contiguous in kk.
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = T(0);
        if (ta) {
          for (std::size_t kk = 0; kk < k; ++kk) acc += a[kk * m + i] * brow[kk];
        } else {
          const T* arow = a + i * k;
          for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        }
        crow[j] += acc;
      }
    }
  }
}

}  // namespace detail
}  // namespace mmcqa
