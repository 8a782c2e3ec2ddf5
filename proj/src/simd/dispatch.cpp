// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <string_view>

#include "ctrlfuse/simd/kernels.hpp"

namespace ctrlfuse::simd {

#ifdef CTRLFUSE_HAVE_AVX2
const KernelTable& avx2_table_impl();
#endif

const KernelTable* avx2_kernels() {
#ifdef CTRLFUSE_HAVE_AVX2
    static const bool supported = [] {
        __builtin_cpu_init();
        return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    }();
    if (supported) return &avx2_table_impl();
#endif
    return nullptr;
}

namespace {

const KernelTable* initial_table() {
    const char* forced = std::getenv("CTRLFUSE_KERNELS");
    if (forced != nullptr && std::string_view(forced) == "scalar") return &scalar_kernels();
    if (const KernelTable* t = avx2_kernels()) return t;
    return &scalar_kernels();
}

std::atomic<const KernelTable*>& current() {
    static std::atomic<const KernelTable*> table{initial_table()};
    return table;
}

}  // namespace

const KernelTable& active_kernels() { return *current().load(std::memory_order_acquire); }

void select_kernels(Isa isa) {
    const KernelTable* t = &scalar_kernels();
    if (isa == Isa::avx2 && avx2_kernels() != nullptr) t = avx2_kernels();
    current().store(t, std::memory_order_release);
}

}  // namespace ctrlfuse::simd
