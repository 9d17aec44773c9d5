#pragma once

#include <cstddef>

namespace tloc::ad::kernels {

// Row-major products. The summation order of an output element depends only
// on k, so results do not change with m, n or the element's position.

/// C[m×n] (+)= A[m×k] · B[k×n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

/// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

/// C[m×n] (+)= A[k×m]ᵀ · B[k×n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

}  // namespace tloc::ad::kernels
