// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>

#include "ctrlfuse/grad_check.hpp"
#include "ctrlfuse/losses.hpp"
#include "ctrlfuse/model.hpp"
#include "ctrlfuse/rng.hpp"

namespace ctrlfuse {

using namespace ad;

namespace {

constexpr double kTol = 1e-4;
constexpr double kKinkedTol = 1e-3;
// Inputs are kept at least this far from every kink of the function checked.
constexpr double kGap = 1e-2;

Tensor rand_leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v), true);
}

// Values in +-[kGap, 1]: away from the kinks of abs / leaky_relu at 0.
Tensor rand_off_zero(Rng& rng, Shape shape) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(kGap, 1.0);
    return Tensor::from(std::move(shape), std::move(v), true);
}

// Moves b's entries at least kGap away from a's so max(a, b) has no tie.
void separate(const Tensor& a, Tensor& b) {
    auto bv = b.mutable_data();
    const auto av = a.data();
    for (std::size_t i = 0; i < bv.size(); ++i)
        if (std::abs(bv[i] - av[i]) < kGap) bv[i] = av[i] + (bv[i] >= av[i] ? kGap : -kGap);
}

// sum(W .* y) with fixed random W: every output coordinate matters and the
// gradients stay O(1).
Tensor weighted(const Tensor& y, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "weights"));
    std::vector<double> w(y.numel());
    for (double& x : w) x = rng.uniform(-1.0, 1.0);
    return sum(mul(y, Tensor::from(y.shape(), std::move(w))));
}

std::vector<ParamProbe> all_of(std::initializer_list<Tensor> ts) {
    std::vector<ParamProbe> out;
    for (const auto& t : ts) out.push_back({t, {}});
    return out;
}

// A few coordinates spread over a tensor.
ParamProbe sample(const Tensor& t, Rng& rng, std::size_t count) {
    ParamProbe p{t, {}};
    for (std::size_t i = 0; i < std::min(count, t.numel()); ++i) p.indices.push_back(rng.below(t.numel()));
    return p;
}

// Unary elementwise op on an off-zero input.
GradCase unary_case(const std::string& name, std::function<Tensor(const Tensor&)> op,
                    std::function<Tensor(Rng&)> input = {}) {
    return {name, "op", kTol, [name, op, input](std::uint64_t seed) {
                Rng rng(derive_seed(seed, name));
                const Tensor x = input ? input(rng) : rand_off_zero(rng, {2, 3, 4});
                return grad_check_leaves([&] { return weighted(op(x), seed); }, all_of({x}));
            }};
}

GradCase binary_case(const std::string& name, std::function<Tensor(const Tensor&, const Tensor&)> op,
                     std::function<Tensor(Rng&)> make_b) {
    return {name, "op", kTol, [name, op, make_b](std::uint64_t seed) {
                Rng rng(derive_seed(seed, name));
                const Tensor a = rand_leaf(rng, {2, 3, 4});
                Tensor b = make_b(rng);
                if (b.shape() == a.shape()) separate(a, b);
                return grad_check_leaves([&] { return weighted(op(a, b), seed); }, all_of({a, b}));
            }};
}

// Small image pair plus a prompt covering a random rectangle.
struct Scene {
    ImagePair pair;
    PromptMask prompt = PromptMask::empty(1, 1);
};

Scene random_scene(Rng& rng, std::size_t s) {
    Scene sc;
    sc.pair.ir = rand_leaf(rng, {1, s, s}, 0.05, 0.95);
    sc.pair.vis = rand_leaf(rng, {3, s, s}, 0.05, 0.95);
    std::vector<double> m(s * s, 0.0);
    const std::size_t y0 = rng.below(s / 2), x0 = rng.below(s / 2);
    for (std::size_t y = y0; y < y0 + s / 2; ++y)
        for (std::size_t x = x0; x < x0 + s / 2; ++x) m[y * s + x] = 1.0;
    sc.prompt = PromptMask::from_values(s, s, m);
    return sc;
}

ModelConfig desk_model(std::uint64_t seed) {
    ModelConfig cfg = ModelConfig::desk();
    cfg.backbone.seed = seed;
    return cfg;
}

// Fused-image loss inputs with I_F pushed off every |.| and max kink.
struct LossScene {
    Tensor f, ir, vis, seg;
};

LossScene loss_scene(Rng& rng, std::size_t s) {
    LossScene l;
    l.ir = rand_leaf(rng, {1, s, s}, 0.05, 0.95);
    l.vis = rand_leaf(rng, {1, s, s}, 0.05, 0.95);
    separate(l.ir, l.vis);
    l.f = rand_leaf(rng, {1, s, s}, 0.05, 0.95);
    l.seg = rand_leaf(rng, {1, s, s}, 0.0, 1.0);
    // Keep I_F away from max(ir, vis) and from their mean.
    auto fv = l.f.mutable_data();
    const auto iv = l.ir.data(), vv = l.vis.data();
    for (std::size_t i = 0; i < fv.size(); ++i) {
        const double mx = std::max(iv[i], vv[i]), mean = 0.5 * (iv[i] + vv[i]);
        for (const double t : {mx, mean})
            if (std::abs(fv[i] - t) < kGap) fv[i] = t + (fv[i] >= t ? kGap : -kGap);
    }
    return l;
}

std::vector<GradCase> build_cases() {
    std::vector<GradCase> c;
    const auto same = [](Rng& rng) { return rand_leaf(rng, {2, 3, 4}); };

    c.push_back(binary_case("add", [](auto& a, auto& b) { return add(a, b); }, same));
    c.push_back(binary_case("add_broadcast_scalar", [](auto& a, auto& b) { return add(a, b); },
                            [](Rng& rng) { return rand_leaf(rng, {1}); }));
    c.push_back(binary_case("add_broadcast_trailing", [](auto& a, auto& b) { return add(a, b); },
                            [](Rng& rng) { return rand_leaf(rng, {2, 1, 1}); }));
    c.push_back(binary_case("sub", [](auto& a, auto& b) { return sub(a, b); }, same));
    c.push_back(binary_case("mul", [](auto& a, auto& b) { return mul(a, b); }, same));
    c.push_back(binary_case("mul_broadcast", [](auto& a, auto& b) { return mul(a, b); },
                            [](Rng& rng) { return rand_leaf(rng, {2, 3, 1}); }));
    c.push_back(binary_case("div", [](auto& a, auto& b) { return div(a, b); },
                            [](Rng& rng) { return rand_leaf(rng, {2, 3, 4}, 0.5, 2.0); }));
    c.push_back(binary_case("maximum", [](auto& a, auto& b) { return maximum(a, b); }, same));
    c.push_back(unary_case("scale", [](auto& x) { return scale(x, -1.7); }));
    c.push_back(unary_case("add_scalar", [](auto& x) { return add_scalar(x, 0.3); }));
    c.push_back(unary_case("leaky_relu", [](auto& x) { return leaky_relu(x); }));
    c.push_back(unary_case("sigmoid", [](auto& x) { return sigmoid(scale(x, 3.0)); }));
    c.push_back(unary_case("tanh", [](auto& x) { return ad::tanh(x); }));
    c.push_back(unary_case("abs", [](auto& x) { return ad::abs(x); }));
    c.push_back(unary_case("square", [](auto& x) { return square(x); }));
    c.push_back(unary_case("sqrt", [](auto& x) { return ad::sqrt(x); },
                           [](Rng& rng) { return rand_leaf(rng, {2, 3, 4}, 0.2, 2.0); }));
    c.push_back(unary_case("log", [](auto& x) { return ad::log(x); },
                           [](Rng& rng) { return rand_leaf(rng, {2, 3, 4}, 0.2, 2.0); }));
    c.push_back(unary_case("clamp", [](auto& x) { return clamp(x, -0.5, 0.5); }, [](Rng& rng) {
        // Nothing within kGap of either bound.
        Tensor x = rand_leaf(rng, {2, 3, 4}, -1.0, 1.0);
        for (double& v : x.mutable_data())
            for (const double b : {-0.5, 0.5})
                if (std::abs(v - b) < kGap) v = b + (v >= b ? kGap : -kGap);
        return x;
    }));
    c.push_back(unary_case("sum", [](auto& x) { return scale(square(sum(x)), 0.5); }));
    c.push_back(unary_case("mean", [](auto& x) { return square(mean(x)); }));
    c.push_back({"matmul", "op", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "matmul"));
                     const Tensor a = rand_leaf(rng, {5, 4}), b = rand_leaf(rng, {4, 3});
                     return grad_check_leaves([&] { return weighted(matmul(a, b), seed); }, all_of({a, b}));
                 }});
    c.push_back(unary_case("transpose", [](auto& x) { return transpose(reshape(x, {4, 6})); }));
    c.push_back({"add_row_bias", "op", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "add_row_bias"));
                     const Tensor x = rand_leaf(rng, {5, 3}), b = rand_leaf(rng, {3});
                     return grad_check_leaves([&] { return weighted(add_row_bias(x, b), seed); }, all_of({x, b}));
                 }});
    c.push_back(unary_case("mean_rows", [](auto& x) { return mean_rows(reshape(x, {6, 4})); }));
    c.push_back(unary_case("softmax_rows", [](auto& x) { return softmax_rows(scale(reshape(x, {4, 6}), 2.0)); }));
    c.push_back({"attention", "op", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "attention"));
                     const Tensor q = rand_leaf(rng, {3, 4}), k = rand_leaf(rng, {5, 4}), v = rand_leaf(rng, {5, 4});
                     return grad_check_leaves([&] { return weighted(attention(q, k, v), seed); }, all_of({q, k, v}));
                 }});
    c.push_back({"attention_two_heads", "op", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "attention2"));
                     const Tensor q = rand_leaf(rng, {3, 4}), k = rand_leaf(rng, {5, 4}), v = rand_leaf(rng, {5, 4});
                     return grad_check_leaves([&] { return weighted(attention(q, k, v, 2), seed); }, all_of({q, k, v}));
                 }});
    for (const std::size_t stride : {1, 2}) {
        const std::string name = "conv2d_stride" + std::to_string(stride);
        c.push_back({name, "op", kTol, [name, stride](std::uint64_t seed) {
                         Rng rng(derive_seed(seed, name));
                         const Tensor x = rand_leaf(rng, {4, 8, 8}), w = rand_leaf(rng, {3, 4, 3, 3}),
                                      b = rand_leaf(rng, {3});
                         return grad_check_leaves([&] { return weighted(conv2d(x, w, b, stride, 1), seed); },
                                                  all_of({x, w, b}));
                     }});
    }
    c.push_back({"conv2d_1x1_nobias", "op", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "conv1x1"));
                     const Tensor x = rand_leaf(rng, {3, 5, 6}), w = rand_leaf(rng, {2, 3, 1, 1});
                     return grad_check_leaves([&] { return weighted(conv2d(x, w, Tensor(), 1, 0), seed); },
                                              all_of({x, w}));
                 }});
    for (const Padding pad : {Padding::zeros, Padding::replicate}) {
        const std::string name = pad == Padding::zeros ? "depthwise_zeros" : "depthwise_replicate";
        c.push_back({name, "op", kTol, [name, pad](std::uint64_t seed) {
                         Rng rng(derive_seed(seed, name));
                         const Tensor x = rand_leaf(rng, {3, 6, 7}), w = rand_leaf(rng, {3, 3, 3});
                         return grad_check_leaves([&] { return weighted(depthwise_conv2d(x, w, pad), seed); },
                                                  all_of({x, w}));
                     }});
    }
    c.push_back(unary_case("avg_pool2d", [](auto& x) { return avg_pool2d(x, 2); }));
    c.push_back(unary_case("avg_pool2d_edge", [](auto& x) { return avg_pool2d(x, 3); }));
    c.push_back(unary_case("global_avg_pool", [](auto& x) { return global_avg_pool(x); }));
    c.push_back(unary_case("downsample_avg", [](auto& x) { return downsample_avg(x); }));
    c.push_back(unary_case("upsample_nearest", [](auto& x) { return upsample_nearest(x, 2); }));
    c.push_back(unary_case("crop_spatial", [](auto& x) { return crop_spatial(x, 2, 3); }));
    c.push_back(unary_case("flatten_spatial", [](auto& x) { return flatten_spatial(x); }));
    c.push_back(unary_case("view_spatial", [](auto& x) { return view_spatial(reshape(x, {12, 2}), 3, 4); }));
    c.push_back(unary_case("concat_channels", [](auto& x) { return concat_channels({x, square(x), x}); }));
    c.push_back(unary_case("slice_channels", [](auto& x) { return slice_channels(x, 1, 2); }));
    c.push_back(unary_case("broadcast_spatial", [](auto& x) { return broadcast_spatial(global_avg_pool(x), 3, 2); }));
    c.push_back(unary_case("broadcast_channels",
                           [](auto& x) { return broadcast_channels(slice_channels(x, 0, 1), 3); }));

    c.push_back({"composite.encode_decode", "composite", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "encode_decode"));
                     CtrlFuseModel model(desk_model(seed));
                     const Scene sc = random_scene(rng, 8);
                     const auto& bb = model.backbone();
                     const auto f = [&] {
                         return weighted(bb.decode(reference_features(bb.encode(Modality::ir, sc.pair.ir),
                                                                       bb.encode(Modality::vis, sc.pair.vis))),
                                         seed);
                     };
                     const auto probes = dominant_probes(f,
                                                         {{sc.pair.ir, 64},
                                                          {sc.pair.vis, 24},
                                                          {bb.encoder(Modality::ir).stem.weight, 8},
                                                          {bb.decoder().layers.front().weight, 8}},
                                                         rng.next_u64());
                     return grad_check_leaves(f, probes);
                 }});
    c.push_back({"composite.rpe", "composite", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "rpe"));
                     CtrlFuseModel model(desk_model(seed));
                     const auto* rpe = model.rpe(Modality::ir);
                     const FeatureMap supp{rand_leaf(rng, {16, 8, 8})}, qry{rand_leaf(rng, {16, 8, 8})};
                     const auto f = [&] { return weighted(rpe->encode_prompt(supp, qry), seed); };
                     const auto probes = dominant_probes(
                         f, {{supp.values, 48}, {qry.values, 48}, {rpe->queries(), 48}}, rng.next_u64());
                     return grad_check_leaves(f, probes);
                 }});
    c.push_back({"composite.rpe_forward", "composite", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "rpe_forward"));
                     CtrlFuseModel model(desk_model(seed));
                     const auto* rpe = model.rpe(Modality::vis);
                     const Scene sc = random_scene(rng, 8);
                     const FeatureMap f_mod{rand_leaf(rng, {16, 8, 8})}, f_ref{rand_leaf(rng, {32, 8, 8})};
                     const auto f = [&] { return weighted(rpe->forward(sc.prompt, f_mod, f_ref), seed); };
                     const auto probes = dominant_probes(f, {{f_mod.values, 64}, {f_ref.values, 64}}, rng.next_u64());
                     return grad_check_leaves(f, probes);
                 }});
    c.push_back({"composite.psfm", "composite", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "psfm"));
                     nn::ParamStore store(seed);
                     const PromptSemanticFusion psfm(store, "psfm", 4, 6, 1);
                     const FeatureMap feat{rand_leaf(rng, {4, 8, 8})};
                     const Tensor p = rand_leaf(rng, {5, 6}), m = rand_leaf(rng, {1, 8, 8}, 0.0, 1.0);
                     const auto f = [&] { return weighted(psfm.forward(feat, p, m).values, seed); };
                     return grad_check_leaves(f, all_of({feat.values, p, m}));
                 }});
    c.push_back({"composite.backend_decode", "composite", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "backend"));
                     CtrlFuseModel model(desk_model(seed));
                     const Tensor img = rand_leaf(rng, {1, 16, 16}, 0.0, 1.0);
                     const Tensor p = rand_leaf(rng, {40, 32});
                     const auto& be = model.backend();
                     const auto f = [&] { return weighted(be.decode(be.encode(img), p), seed); };
                     return grad_check_leaves(f, dominant_probes(f, {{img, 64}, {p, 64}}, rng.next_u64()));
                 }});
    c.push_back({"composite.full_forward", "composite", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "full"));
                     CtrlFuseModel model(desk_model(seed));
                     const Scene sc = random_scene(rng, 8);
                     const auto f = [&] {
                         const auto r = model.forward(sc.pair, sc.prompt, IntensityControl{2.0});
                         return add(weighted(r.i_f, seed), weighted(r.i_seg, seed + 1));
                     };
                     const auto probes = dominant_probes(f,
                                                         {{sc.pair.ir, 64},
                                                          {sc.pair.vis, 32},
                                                          {model.params().get("rpe_ir.query_conv.weight"), 16},
                                                          {model.params().get("psfm_vis.attn.v.weight"), 16},
                                                          {model.params().get("composer.proj_vis.weight"), 16}},
                                                         rng.next_u64());
                     return grad_check_leaves(f, probes);
                 }});

    c.push_back({"loss.pixel", "loss", kKinkedTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "pixel"));
                     const LossScene l = loss_scene(rng, 8);
                     return grad_check_leaves([&] { return pixel_loss(l.f, l.ir, l.vis, l.seg); },
                                              all_of({l.f, l.ir, l.vis, l.seg}));
                 }});
    c.push_back({"loss.grad", "loss", kKinkedTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "grad"));
                     const LossScene l = loss_scene(rng, 8);
                     return grad_check_leaves([&] { return grad_loss(l.f, l.ir, l.vis); }, all_of({l.f, l.ir, l.vis}));
                 }});
    c.push_back({"loss.int", "loss", kKinkedTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "int"));
                     const LossScene l = loss_scene(rng, 8);
                     return grad_check_leaves([&] { return int_loss(l.f, l.ir, l.vis); }, all_of({l.f, l.ir, l.vis}));
                 }});
    c.push_back({"loss.percep", "loss", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "percep"));
                     const FrozenPerceptualNet net(seed);
                     const LossScene l = loss_scene(rng, 16);
                     return grad_check_leaves([&] { return perceptual_loss(l.f, l.ir, l.vis, net); },
                                              {sample(l.f, rng, 48), sample(l.ir, rng, 16), sample(l.vis, rng, 16)});
                 }});
    c.push_back({"loss.bce", "loss", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "bce"));
                     const Tensor p = rand_leaf(rng, {1, 8, 8}, 0.05, 0.95);
                     const Tensor y = rand_leaf(rng, {1, 8, 8}, 0.0, 1.0);
                     return grad_check_leaves([&] { return bce_loss(p, y); }, all_of({p, y}));
                 }});
    c.push_back({"loss.dice", "loss", kTol, [](std::uint64_t seed) {
                     Rng rng(derive_seed(seed, "dice"));
                     const Tensor p = rand_leaf(rng, {1, 8, 8}, 0.0, 1.0);
                     const Tensor y = rand_leaf(rng, {1, 8, 8}, 0.0, 1.0);
                     return grad_check_leaves([&] { return dice_loss(p, y); }, all_of({p, y}));
                 }});
    return c;
}

}  // namespace

const std::vector<GradCase>& grad_cases() {
    static const std::vector<GradCase> cases = build_cases();
    return cases;
}

std::vector<GradCaseResult> run_grad_suite(std::size_t seeds, std::uint64_t base_seed) {
    std::vector<GradCaseResult> out;
    for (const auto& c : grad_cases()) {
        GradCaseResult r{c.name, c.group, 0.0, c.tolerance, seeds, false};
        for (std::size_t s = 0; s < seeds; ++s) r.worst = std::max(r.worst, c.run(base_seed + s));
        r.passed = r.worst < c.tolerance;
        out.push_back(r);
    }
    return out;
}

}  // namespace ctrlfuse
