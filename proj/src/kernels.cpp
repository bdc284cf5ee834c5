#include "roomroam/kernels.hpp"

#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace roomroam::kernels {

namespace {

// One output row. The k loop is outermost so B is streamed row-wise when it is not transposed;
// the summation order for each C(i, j) is p = 0 .. k-1 in every variant.
inline void gemm_row(std::size_t i, std::size_t n, std::size_t k, MatView a, MatView b, double* c, std::size_t ldc,
                     bool accumulate) {
  double* crow = c + i * ldc;
  if (!accumulate)
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
  if (!b.transposed) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      if (aip == 0.0) continue;
      const double* brow = b.data + p * b.ld;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      const double* bcol = b.data + j * b.ld;  // column j of B is row j of the stored matrix
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * bcol[p];
      crow[j] += acc;
    }
  }
}

}  // namespace

namespace serial {

void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, double* c, std::size_t ldc,
          bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) gemm_row(i, n, k, a, b, c, ldc, accumulate);
}

}  // namespace serial

namespace omp {

void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, double* c, std::size_t ldc,
          bool accumulate) {
  const auto rows = static_cast<long long>(m);
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < rows; ++i) gemm_row(static_cast<std::size_t>(i), n, k, a, b, c, ldc, accumulate);
}

}  // namespace omp

void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, double* c, std::size_t ldc,
          bool accumulate) {
#ifdef _OPENMP
  if (m >= 32 && m * n * k >= (1u << 18) && !omp_in_parallel() && omp_get_max_threads() > 1) {
    omp::gemm(m, n, k, a, b, c, ldc, accumulate);
    return;
  }
#endif
  serial::gemm(m, n, k, a, b, c, ldc, accumulate);
}

}  // namespace roomroam::kernels
