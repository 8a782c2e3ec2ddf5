// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 inner loops used by the tensor engine and the metrics. Every entry
// has a portable scalar reference; wider variants are picked once at startup
// from the CPU's feature bits and must agree with the reference to rounding.
#pragma once

#include <cstddef>
#include <string_view>

namespace ctrlfuse::simd {

enum class Isa { scalar, avx2 };

struct KernelTable {
    Isa isa;
    std::string_view name;

    /// C[M x N] = (accumulate ? C : 0) + A[M x K] * B[K x N], all row-major.
    void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
    double (*dot)(const double* x, const double* y, std::size_t n);
    /// y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    /// out = x * y elementwise (out may alias x or y)
    void (*mul)(const double* x, const double* y, double* out, std::size_t n);
    double (*sum)(const double* x, std::size_t n);
    /// sum of (x - y)^2
    double (*sum_sq_diff)(const double* x, const double* y, std::size_t n);
};

const KernelTable& scalar_kernels();

/// nullptr when the binary or the CPU lacks AVX2+FMA.
const KernelTable* avx2_kernels();

/// Kernel table chosen for this process. CTRLFUSE_KERNELS=scalar forces the
/// reference path.
const KernelTable& active_kernels();

/// Override the process-wide choice (tests, benchmarking).
void select_kernels(Isa isa);

}  // namespace ctrlfuse::simd
