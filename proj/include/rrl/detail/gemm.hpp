#pragma once
// Row-major GEMM: C = alpha*op(A)*op(B) + beta*C. Backed by single-threaded
// OpenBLAS when available; callers layer their own batch-level parallelism on
// top so results stay independent of the thread count.

namespace rrl::detail {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc);

}  // namespace rrl::detail
