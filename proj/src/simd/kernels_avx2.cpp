// SPDX-License-Identifier: Apache-2.0
//
// AVX2 + FMA variants. This translation unit is the only one compiled with
// -mavx2 -mfma; nothing here may run before dispatch has checked the CPU.
#include "ctrlfuse/simd/kernels.hpp"

#include <immintrin.h>

namespace ctrlfuse::simd {
namespace {

inline double hsum(__m256d v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

// R rows x 8 columns register tile.
template <int R>
inline void tile8(std::size_t k, const double* a, std::size_t lda, const double* b, std::size_t ldb,
                  double* c, std::size_t ldc, bool accumulate) {
    __m256d acc0[R];
    __m256d acc1[R];
    for (int r = 0; r < R; ++r) {
        acc0[r] = _mm256_setzero_pd();
        acc1[r] = _mm256_setzero_pd();
    }
    for (std::size_t p = 0; p < k; ++p) {
        const __m256d b0 = _mm256_loadu_pd(b + p * ldb);
        const __m256d b1 = _mm256_loadu_pd(b + p * ldb + 4);
        for (int r = 0; r < R; ++r) {
            const __m256d av = _mm256_broadcast_sd(a + r * lda + p);
            acc0[r] = _mm256_fmadd_pd(av, b0, acc0[r]);
            acc1[r] = _mm256_fmadd_pd(av, b1, acc1[r]);
        }
    }
    for (int r = 0; r < R; ++r) {
        double* crow = c + r * ldc;
        if (accumulate) {
            acc0[r] = _mm256_add_pd(acc0[r], _mm256_loadu_pd(crow));
            acc1[r] = _mm256_add_pd(acc1[r], _mm256_loadu_pd(crow + 4));
        }
        _mm256_storeu_pd(crow, acc0[r]);
        _mm256_storeu_pd(crow + 4, acc1[r]);
    }
}

template <int R>
inline void tile4(std::size_t k, const double* a, std::size_t lda, const double* b, std::size_t ldb,
                  double* c, std::size_t ldc, bool accumulate) {
    __m256d acc[R];
    for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
        const __m256d b0 = _mm256_loadu_pd(b + p * ldb);
        for (int r = 0; r < R; ++r)
            acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + r * lda + p), b0, acc[r]);
    }
    for (int r = 0; r < R; ++r) {
        double* crow = c + r * ldc;
        if (accumulate) acc[r] = _mm256_add_pd(acc[r], _mm256_loadu_pd(crow));
        _mm256_storeu_pd(crow, acc[r]);
    }
}

template <int R>
inline void row_block(std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
                      std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) tile8<R>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
    for (; j + 4 <= n; j += 4) tile4<R>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
    for (; j < n; ++j) {
        for (int r = 0; r < R; ++r) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[r * lda + p] * b[p * ldb + j];
            c[r * ldc + j] = accumulate ? c[r * ldc + j] + s : s;
        }
    }
}

void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) row_block<4>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
    for (; i < m; ++i) row_block<1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void mul_avx2(const double* x, const double* y, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) out[i] = x[i] * y[i];
}

double sum_avx2(const double* x, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
        acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += x[i];
    return s;
}

double sum_sq_diff_avx2(const double* x, const double* y, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
        acc = _mm256_fmadd_pd(d, d, acc);
    }
    double s = hsum(acc);
    for (; i < n; ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

}  // namespace

const KernelTable& avx2_table_impl() {
    static const KernelTable table{Isa::avx2, "avx2",   &gemm_avx2, &dot_avx2,
                                   &axpy_avx2, &mul_avx2, &sum_avx2, &sum_sq_diff_avx2};
    return table;
}

}  // namespace ctrlfuse::simd
