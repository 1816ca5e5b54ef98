#pragma once

#include <cstdint>

namespace magmix {

// Row-major C = alpha * op(A) * op(B) + beta * C, with op(A) M×K and op(B) K×N.
// Backed by OpenBLAS for float and double.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c, std::int64_t ldc);

// Intra-op BLAS threads. 1 gives bit-reproducible results.
void set_num_threads(int threads);

}  // namespace magmix
