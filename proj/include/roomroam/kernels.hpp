#pragma once

#include <cstddef>

// Dense row-major kernels. Every variant computes each output element with the same
// sequential inner loop, so the OpenMP versions are bit-identical to the serial ones.
namespace roomroam::kernels {

struct MatView {
  const double* data;
  std::size_t ld;  // row stride
  bool transposed = false;

  double at(std::size_t r, std::size_t c) const { return transposed ? data[c * ld + r] : data[r * ld + c]; }
};

// C[m x n] = A[m x k] * B[k x n] (+ C when accumulate).
namespace serial {
void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, double* c, std::size_t ldc,
          bool accumulate);
}  // namespace serial

namespace omp {
void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, double* c, std::size_t ldc,
          bool accumulate);
}  // namespace omp

// Picks the OpenMP variant for large products outside an enclosing parallel region.
void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, double* c, std::size_t ldc,
          bool accumulate);

}  // namespace roomroam::kernels
