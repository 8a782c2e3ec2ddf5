// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/rng.hpp"

namespace ctrlfuse::ad {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

namespace {

constexpr int kMaxStepShrinks = 3;
constexpr double kResolvableFraction = 1e-5;

struct Stencil {
    double central = 0.0;
    double gap = 0.0;  // |forward slope - backward slope|
    double scale = 0.0;
};

// One-sided slopes of a smooth function differ by O(h f''); a kink inside
// the stencil makes them differ by the jump in the derivative. A kink moves
// the central estimate by at most half the gap, so gaps below the checked
// tolerance are harmless. Gaps within the rounding noise of f carry no
// information either way.
bool suspicious(const Stencil& s, double noise) { return s.gap > std::max(5e-5 * s.scale, noise); }

// Rounding in f(x +- h) alone makes the one-sided slopes disagree by about
// ulp(f) / h; 64 ulps covers the accumulation inside a forward pass.
double gap_noise(double f, double h) {
    return 64.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(f), 1.0) / h;
}

enum class GapTrend { smooth, kink_left, kink_inside, rounding };

// How the gap responds to a tenfold smaller step: curvature shrinks it ~10x,
// a kink leaving the stencil collapses it, a kink still inside keeps it, and
// rounding noise inflates it ~10x.
GapTrend classify(const Stencil& wide, const Stencil& narrow) {
    const double ratio = narrow.gap / wide.gap;
    if (ratio < 0.05) return GapTrend::kink_left;
    if (ratio <= 0.2) return GapTrend::smooth;
    if (ratio < 3.0) return GapTrend::kink_inside;
    return GapTrend::rounding;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    Tensor leaf = Tensor::from(x.shape(), x.to_vector(), true);
    return grad_check_leaves([&] { return f(leaf); }, {ParamProbe{leaf, {}}}, eps);
}

double grad_check_leaves(const std::function<Tensor()>& f, const std::vector<ParamProbe>& probes, double eps) {
    for (const auto& p : probes) {
        if (!p.tensor.requires_grad()) throw ContractError("grad_check: probed tensor does not require grad");
        p.tensor.node().grad.clear();
    }
    {
        const Tensor loss = f();
        backward(loss);
    }
    double worst = 0.0;
    NoGradGuard no_grad;
    const double base = f().item();
    for (const auto& p : probes) {
        const auto analytic = p.tensor.grad();
        Tensor t = p.tensor;
        auto values = t.mutable_data();
        std::vector<std::size_t> idx = p.indices;
        if (idx.empty()) {
            idx.resize(values.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        }
        for (const auto i : idx) {
            const double saved = values[i];
            const auto measure = [&](double h) {
                values[i] = saved + h;
                const double up = f().item();
                values[i] = saved - h;
                const double down = f().item();
                values[i] = saved;
                const double fwd = (up - base) / h, bwd = (base - down) / h;
                return Stencil{(up - down) / (2.0 * h), std::abs(fwd - bwd), std::max(std::abs(fwd), std::abs(bwd))};
            };
            Stencil s = measure(eps);
            double numeric = s.central;
            double h = eps;
            for (int attempt = 0; attempt < kMaxStepShrinks && suspicious(s, gap_noise(base, h)); ++attempt) {
                h *= 0.1;
                const Stencil narrow = measure(h);
                const GapTrend trend = classify(s, narrow);
                if (trend == GapTrend::smooth || trend == GapTrend::rounding) break;  // the wide step is better
                s = narrow;
                numeric = narrow.central;
                if (trend == GapTrend::kink_left) break;
            }
            worst = std::max(worst, relative_error(analytic[i], numeric));
        }
    }
    for (const auto& p : probes) p.tensor.node().grad.clear();
    return worst;
}

std::vector<ParamProbe> dominant_probes(const std::function<Tensor()>& f,
                                        const std::vector<std::pair<Tensor, std::size_t>>& tensors,
                                        std::uint64_t seed) {
    for (const auto& [t, count] : tensors) {
        if (!t.requires_grad()) throw ContractError("dominant_probes: tensor does not require grad");
        t.node().grad.clear();
    }
    backward(f());
    // Finite differences resolve a gradient only to a fixed absolute accuracy
    // set by the magnitude of f, so coordinates far below the largest
    // gradient of the objective cannot be checked at a relative tolerance.
    double global_top = 0.0;
    for (const auto& [t, count] : tensors)
        for (const double v : t.grad()) global_top = std::max(global_top, std::abs(v));
    Rng rng(seed);
    std::vector<ParamProbe> probes;
    for (const auto& [t, count] : tensors) {
        const auto g = t.grad();
        double top = 0.0;
        for (const double v : g) top = std::max(top, std::abs(v));
        const double floor = std::max(1e-2 * top, kResolvableFraction * global_top);
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (top > 0.0 && std::abs(g[i]) >= floor) pool.push_back(i);
        ParamProbe p{t, {}};
        if (top == 0.0) {
            // An all-zero gradient still gets probed: the differences must agree it is zero.
            for (std::size_t k = 0; k < std::min(count, g.size()); ++k) p.indices.push_back(rng.below(g.size()));
        } else {
            for (std::size_t k = 0; k < count && !pool.empty(); ++k) p.indices.push_back(pool[rng.below(pool.size())]);
        }
        if (top == 0.0 || !pool.empty()) probes.push_back(std::move(p));
        t.node().grad.clear();
    }
    return probes;
}

}  // namespace ctrlfuse::ad
