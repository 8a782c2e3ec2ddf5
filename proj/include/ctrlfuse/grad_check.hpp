// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "ctrlfuse/tensor.hpp"

namespace ctrlfuse::ad {

/// |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)
double relative_error(double analytic, double numeric);

/// Compare reverse-mode gradients of the scalar function `f` at `x` against
/// central differences, one coordinate at a time. Returns the worst relative
/// error over all coordinates. A coordinate whose +-eps stencil straddles a
/// kink (the one-sided slopes disagree by more than curvature explains) is
/// re-measured with the step shrunk tenfold, at most three times.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

struct ParamProbe {
    Tensor tensor;                     // a leaf with requires_grad set
    std::vector<std::size_t> indices;  // empty: every coordinate
};

/// Same check against leaves the closure captures (weights, several inputs).
/// Each probed coordinate is perturbed in place and restored afterwards.
double grad_check_leaves(const std::function<Tensor()>& f, const std::vector<ParamProbe>& probes,
                         double eps = 1e-5);

/// Draws `count` coordinates per tensor (with replacement) among those whose
/// gradient under f is within a factor 100 of that tensor's largest and
/// within 1e-5 of the largest over all listed tensors. Central differences
/// resolve a derivative only to about rounding(f) / eps in absolute terms, so
/// far smaller coordinates would measure noise. A tensor with no such
/// coordinate is left out; one with an all-zero gradient is probed anyway.
std::vector<ParamProbe> dominant_probes(const std::function<Tensor()>& f,
                                        const std::vector<std::pair<Tensor, std::size_t>>& tensors,
                                        std::uint64_t seed);

}  // namespace ctrlfuse::ad
