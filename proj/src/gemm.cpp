#include "rrl/detail/gemm.hpp"

#ifdef RRL_USE_OPENBLAS
#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace {
struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;
}  // namespace

namespace rrl::detail {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace rrl::detail

#else

namespace rrl::detail {

// Fallback blocked GEMM. Accumulation order over k is fixed per output
// element, so results are deterministic.
template <class S>
static void gemm_impl(bool trans_a, bool trans_b, int m, int n, int k, S alpha, const S* a, int lda,
                      const S* b, int ldb, S beta, S* c, int ldc) {
    auto at = [&](int i, int j) { return trans_a ? a[j * lda + i] : a[i * lda + j]; };
    auto bt = [&](int i, int j) { return trans_b ? b[j * ldb + i] : b[i * ldb + j]; };
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) c[i * ldc + j] *= beta;
    }
    constexpr int KB = 64;
    for (int k0 = 0; k0 < k; k0 += KB) {
        int k1 = k0 + KB < k ? k0 + KB : k;
        for (int i = 0; i < m; ++i) {
            for (int p = k0; p < k1; ++p) {
                S av = alpha * at(i, p);
                for (int j = 0; j < n; ++j) c[i * ldc + j] += av * bt(p, j);
            }
        }
    }
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
    gemm_impl(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
    gemm_impl(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace rrl::detail

#endif
