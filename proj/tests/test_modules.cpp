// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "ctrlfuse/backbone.hpp"
#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/grad_check.hpp"
#include "ctrlfuse/psfm.hpp"
#include "ctrlfuse/rpe.hpp"
#include "ctrlfuse/segmentation.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace ctrlfuse;
using ad::Shape;

namespace {

Tensor uniform(std::mt19937_64& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(ad::numel(shape));
    for (double& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v));
}

void fill(Tensor t, double value) {
    for (double& x : t.mutable_data()) x = value;
}

void zero_matching(const nn::ParamStore& store, const std::string& prefix, const std::string& suffix = "") {
    for (const auto& e : store.entries())
        if (e.name.rfind(prefix, 0) == 0 && (suffix.empty() || e.name.ends_with(suffix))) fill(e.tensor, 0.0);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double row_variance(const Tensor& m) {
    // Largest per-column variance across rows.
    const std::size_t r = m.dim(0), c = m.dim(1);
    double worst = 0;
    for (std::size_t j = 0; j < c; ++j) {
        double mu = 0, var = 0;
        for (std::size_t i = 0; i < r; ++i) mu += m.data()[i * c + j];
        mu /= static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i) var += std::pow(m.data()[i * c + j] - mu, 2);
        worst = std::max(worst, var / static_cast<double>(r));
    }
    return worst;
}

Tensor weighted(const Tensor& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return ad::sum(ad::mul(y, uniform(rng, y.shape(), -1.0, 1.0)));
}

struct RpeRig {
    nn::ParamStore store{99};
    SegmentationBackend backend{store, BackendConfig{}};
    ReferencePromptEncoder rpe;
    explicit RpeRig(bool exchange = false) : rpe(store, "rpe", RpeConfig{16, 32, 40, 1, exchange}, backend) {}
};

}  // namespace

TEST_SUITE("backbone") {

TEST_CASE("encoder shapes and determinism") {
    nn::ParamStore store(1);
    FusionBackbone bb(store, BackboneConfig{});
    std::mt19937_64 rng(1);
    const auto vis = uniform(rng, {3, 64, 64});
    const auto f = bb.encode(Modality::vis, vis);
    CHECK(f.values.shape() == Shape{16, 64, 64});
    CHECK(values(bb.encode(Modality::vis, vis).values) == values(f.values));
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {9, 13}, {16, 12}})
        CHECK(bb.encode(Modality::ir, uniform(rng, {1, h, w})).values.shape() == Shape{16, h, w});
    CHECK_THROWS_AS(bb.encode(Modality::ir, vis), ShapeError);
    CHECK_THROWS_AS(bb.encode(Modality::vis, uniform(rng, {1, 8, 8})), ShapeError);
}

TEST_CASE("zero image with zero biases encodes to zero") {
    nn::ParamStore store(2);
    FusionBackbone bb(store, BackboneConfig{});
    zero_matching(store, "backbone.enc_ir", ".bias");
    const auto f = bb.encode(Modality::ir, Tensor::zeros({1, 12, 12}));
    for (double v : f.values.data()) CHECK(v == 0.0);
}

TEST_CASE("grdb sobel branch and residual identity") {
    nn::ParamStore store(3);
    Grdb block(store, "g", 4);
    const auto c = Tensor::full({4, 8, 8}, 0.6);
    const auto s = block.sobel_branch(c);
    for (std::size_t ch = 0; ch < s.dim(0); ++ch)
        for (std::size_t y = 1; y < 7; ++y)
            for (std::size_t x = 1; x < 7; ++x) CHECK(s.data()[(ch * 8 + y) * 8 + x] == 0.0);

    zero_matching(store, "g", ".bias");
    const auto silent = block.forward(Tensor::zeros({4, 8, 8}));
    for (double v : silent.data()) CHECK(v == 0.0);

    zero_matching(store, "g");
    std::mt19937_64 rng(3);
    const auto x = uniform(rng, {4, 8, 8});
    CHECK(values(block.forward(x)) == values(x));
}

TEST_CASE("reference features concatenate ir then vis") {
    std::mt19937_64 rng(4);
    const FeatureMap a{uniform(rng, {16, 8, 8})}, b{uniform(rng, {16, 8, 8})};
    const auto r = reference_features(a, b);
    CHECK(r.values.shape() == Shape{32, 8, 8});
    CHECK(values(ad::slice_channels(r.values, 0, 16)) == values(a.values));
    CHECK(values(ad::slice_channels(r.values, 16, 32)) == values(b.values));
    CHECK_THROWS_AS(reference_features(a, FeatureMap{uniform(rng, {16, 8, 4})}), ShapeError);
}

TEST_CASE("decoder output range and shape") {
    nn::ParamStore store(5);
    FusionBackbone bb(store, BackboneConfig{});
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const auto out = bb.decode(FeatureMap{uniform(rng, {32, 8, 8}, -3.0, 3.0)});
        REQUIRE(out.shape() == Shape{1, 8, 8});
        for (double v : out.data()) CHECK((v >= 0.0 && v <= 1.0));
    }
    CHECK_THROWS_AS(bb.decode(FeatureMap{uniform(rng, {16, 8, 8})}), ShapeError);
}

TEST_CASE("config validation") {
    BackboneConfig cfg;
    cfg.decoder_schedule = {32, 16, 3};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(BackboneConfig::full().validate());
    CHECK(BackboneConfig::full().decoder_schedule == std::vector<std::size_t>{256, 128, 64, 32, 16, 1});
}

TEST_CASE("encode -> decode gradient on 8x8") {
    nn::ParamStore store(6);
    FusionBackbone bb(store, BackboneConfig{});
    std::mt19937_64 rng(6);
    auto ir = uniform(rng, {1, 8, 8});
    auto vis = uniform(rng, {3, 8, 8});
    ir.set_requires_grad(true);
    vis.set_requires_grad(true);
    const auto f = [&] {
        const auto fr = reference_features(bb.encode(Modality::ir, ir), bb.encode(Modality::vis, vis));
        return weighted(bb.decode(fr), 61);
    };
    CHECK(ad::grad_check_leaves(f, {{ir, {}}, {vis, {}}}) < 1e-4);
}

}

TEST_SUITE("rpe") {

TEST_CASE("target pooling examples") {
    std::mt19937_64 rng(7);
    const auto f = FeatureMap{uniform(rng, {4, 6, 6})};
    const auto zero = ReferencePromptEncoder::target_pool(PromptMask::empty(6, 6), f);
    CHECK(zero.shape() == Shape{4, 1, 1});
    for (double v : zero.data()) CHECK(v == 0.0);

    const auto all = ReferencePromptEncoder::target_pool(PromptMask::full(6, 6), f);
    const auto gap = ad::global_avg_pool(f.values);
    for (std::size_t c = 0; c < 4; ++c) CHECK(all.data()[c] == doctest::Approx(gap.data()[c]).epsilon(1e-14));

    std::vector<double> one(36, 0.0);
    one[2 * 6 + 3] = 1.0;
    const auto px = ReferencePromptEncoder::target_pool(PromptMask::from_values(6, 6, one), f);
    for (std::size_t c = 0; c < 4; ++c)
        CHECK(px.data()[c] == doctest::Approx(f.values.data()[c * 36 + 15] / 36.0).epsilon(1e-14));

    CHECK_THROWS_AS(ReferencePromptEncoder::target_pool(PromptMask::full(5, 6), f), ShapeError);
}

TEST_CASE("zero mask ignores masked-out support pixels") {
    std::mt19937_64 rng(8);
    auto f = FeatureMap{uniform(rng, {4, 6, 6})};
    const auto a = ReferencePromptEncoder::target_pool(PromptMask::empty(6, 6), f);
    for (double& v : f.values.mutable_data()) v += 10.0;
    CHECK(values(ReferencePromptEncoder::target_pool(PromptMask::empty(6, 6), f)) == values(a));
}

TEST_CASE("support/query construction") {
    RpeRig rig;
    std::mt19937_64 rng(9);
    const FeatureMap fm{uniform(rng, {16, 8, 8})}, fr{uniform(rng, {32, 8, 8})};
    const auto ft = ReferencePromptEncoder::target_pool(PromptMask::empty(8, 8), fm);
    const auto [supp, qry] = rig.rpe.build_support_query(fm, fr, ft);
    CHECK(supp.values.shape() == Shape{16, 8, 8});
    CHECK(qry.values.shape() == Shape{16, 8, 8});
    const auto again = rig.rpe.build_support_query(fm, fr, ft);
    CHECK(values(again.first.values) == values(supp.values));
    CHECK(values(again.second.values) == values(qry.values));

    // With F_t = 0 and zero biases, F_supp is a function of F_modality alone.
    zero_matching(rig.store, "rpe.support_conv", ".bias");
    const auto s1 = rig.rpe.build_support_query(fm, fr, ft).first;
    const auto s2 = rig.rpe.build_support_query(fm, FeatureMap{uniform(rng, {32, 8, 8})}, ft).first;
    CHECK(values(s1.values) == values(s2.values));
}

TEST_CASE("prompt tokens shape and uniform-softmax oracle") {
    RpeRig rig;
    std::mt19937_64 rng(10);
    const FeatureMap supp{uniform(rng, {16, 8, 8})}, qry{uniform(rng, {16, 8, 8})};
    CHECK(rig.rpe.encode_prompt(supp, qry).shape() == Shape{40, 32});

    const FeatureMap c{Tensor::full({16, 8, 8}, 0.3)};
    CHECK(row_variance(rig.rpe.encode_tokens(c, c)) < 1e-10);

    const auto pa = rig.rpe.encode_prompt(supp, qry), pb = rig.rpe.encode_prompt(qry, supp);
    CHECK(oracle::linf(pa, pb) > 0.0);
}

TEST_CASE("exchange_sq changes the branch output") {
    RpeRig plain(false), swapped(true);
    std::mt19937_64 rng(11);
    const FeatureMap fm{uniform(rng, {16, 8, 8})}, fr{uniform(rng, {32, 8, 8})};
    std::vector<double> m(64, 0.0);
    for (std::size_t i = 20; i < 40; ++i) m[i] = 1.0;
    const auto mask = PromptMask::from_values(8, 8, m);
    CHECK(oracle::linf(plain.rpe.forward(mask, fm, fr), swapped.rpe.forward(mask, fm, fr)) > 0.0);
}

TEST_CASE("zero mask still yields finite tokens; identical branches agree") {
    RpeRig a, b;
    std::mt19937_64 rng(12);
    const FeatureMap fm{uniform(rng, {16, 8, 8})}, fr{uniform(rng, {32, 8, 8})};
    const auto p = a.rpe.forward(PromptMask::empty(8, 8), fm, fr);
    for (double v : p.data()) CHECK(std::isfinite(v));
    CHECK(values(b.rpe.forward(PromptMask::empty(8, 8), fm, fr)) == values(p));
}

TEST_CASE("every trainable rpe parameter receives gradient") {
    RpeRig rig;
    std::mt19937_64 rng(13);
    const FeatureMap fm{uniform(rng, {16, 8, 8})}, fr{uniform(rng, {32, 8, 8})};
    std::vector<double> m(64, 0.0);
    for (std::size_t i = 8; i < 30; ++i) m[i] = 1.0;
    ad::backward(weighted(rig.rpe.forward(PromptMask::from_values(8, 8, m), fm, fr), 5));
    for (const auto& e : rig.store.entries()) {
        if (!e.trainable) continue;
        double norm = 0;
        for (double g : e.tensor.grad()) norm += g * g;
        CAPTURE(e.name);
        CHECK(norm > 0.0);
    }
}

TEST_CASE("encode_prompt gradient on 8x8") {
    RpeRig rig;
    std::mt19937_64 rng(14);
    auto supp = uniform(rng, {16, 8, 8}, -1, 1), qry = uniform(rng, {16, 8, 8}, -1, 1);
    supp.set_requires_grad(true);
    qry.set_requires_grad(true);
    const auto f = [&] { return weighted(rig.rpe.encode_prompt(FeatureMap{supp}, FeatureMap{qry}), 3); };
    CHECK(ad::grad_check_leaves(f, {{supp, {}}, {qry, {}}}) < 1e-4);
}

}

TEST_SUITE("psfm") {

TEST_CASE("gating, shapes and single-token oracle") {
    nn::ParamStore store(20);
    PromptSemanticFusion psfm(store, "psfm", 16, 32, 1);
    std::mt19937_64 rng(20);
    const FeatureMap f{uniform(rng, {16, 64, 64})};
    const auto p = uniform(rng, {40, 32}, -1, 1);

    const auto gated = psfm.forward(f, p, Tensor::zeros({1, 64, 64}));
    CHECK(gated.values.shape() == Shape{16, 64, 64});
    for (double v : gated.values.data()) CHECK(v == 0.0);

    const auto tok = uniform(rng, {1, 32}, -1, 1);
    std::vector<double> rep;
    for (int i = 0; i < 40; ++i) rep.insert(rep.end(), tok.data().begin(), tok.data().end());
    const auto pre = psfm.enhanced(FeatureMap{uniform(rng, {16, 8, 8})}, Tensor::from({40, 32}, rep));
    // Spatial variance per channel of the pre-gate map.
    double worst = 0;
    for (std::size_t c = 0; c < 16; ++c) {
        double mu = 0, var = 0;
        for (std::size_t i = 0; i < 64; ++i) mu += pre.data()[c * 64 + i];
        mu /= 64;
        for (std::size_t i = 0; i < 64; ++i) var += std::pow(pre.data()[c * 64 + i] - mu, 2);
        worst = std::max(worst, var / 64);
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("gate is exact pixelwise") {
    nn::ParamStore store(21);
    PromptSemanticFusion psfm(store, "psfm", 16, 32, 1);
    std::mt19937_64 rng(21);
    auto m = uniform(rng, {1, 8, 8});
    for (std::size_t i = 0; i < 64; i += 3) m.mutable_data()[i] = 0.0;
    const auto out = psfm.forward(FeatureMap{uniform(rng, {16, 8, 8})}, uniform(rng, {40, 32}), m);
    for (std::size_t c = 0; c < 16; ++c)
        for (std::size_t i = 0; i < 64; i += 3) CHECK(out.values.data()[c * 64 + i] == 0.0);
}

TEST_CASE("composer control linearity and alpha zero") {
    nn::ParamStore store(22);
    FeatureComposer comp(store, "composer", 16, 32);
    std::mt19937_64 rng(22);
    const FeatureMap ref{uniform(rng, {32, 8, 8})}, a{uniform(rng, {16, 8, 8})}, b{uniform(rng, {16, 8, 8})};
    const auto zero = comp.compose(ref, &a, &b, {0.0});
    CHECK(values(zero.values) == values(ref.values));
    const double base = oracle::l1(comp.compose(ref, &a, &b, {1.0}).values, ref.values);
    REQUIRE(base > 0.0);
    for (double alpha : {0.5, 2.0, 5.0, 10.0}) {
        const double d = oracle::l1(comp.compose(ref, &a, &b, {alpha}).values, ref.values);
        CHECK(std::abs(d - alpha * base) <= 1e-9 * alpha * base);
    }
    CHECK(oracle::linf(comp.compose(ref, &a, &b, {1.0}).values, comp.compose(ref, &a, &b, {5.0}).values) > 0.0);
    CHECK_THROWS(IntensityControl{-1.0}.validate());
}

TEST_CASE("psfm gradient on 8x8") {
    nn::ParamStore store(23);
    PromptSemanticFusion psfm(store, "psfm", 16, 32, 1);
    std::mt19937_64 rng(23);
    auto f = uniform(rng, {16, 8, 8}, -1, 1), p = uniform(rng, {40, 32}, -1, 1), m = uniform(rng, {1, 8, 8});
    f.set_requires_grad(true);
    p.set_requires_grad(true);
    m.set_requires_grad(true);
    const auto fn = [&] { return weighted(psfm.forward(FeatureMap{f}, p, m).values, 4); };
    CHECK(ad::grad_check_leaves(fn, {{f, {}}, {p, {}}, {m, {}}}) < 1e-4);
}

}

TEST_SUITE("segmentation") {

TEST_CASE("image encoder contract") {
    nn::ParamStore store(30);
    SegmentationBackend be(store, BackendConfig{});
    std::mt19937_64 rng(30);
    const auto img = uniform(rng, {1, 16, 12});
    const auto e = be.encode(img);
    CHECK(e.shape() == Shape{32, 4, 3});
    CHECK(values(be.encode(img)) == values(e));
    CHECK_THROWS_AS(be.encode(uniform(rng, {1, 10, 12})), ShapeError);

    auto x = uniform(rng, {1, 16, 16});
    x.set_requires_grad(true);
    ad::backward(weighted(be.encode(x), 2));
    double norm = 0;
    for (double g : x.grad()) norm += g * g;
    CHECK(norm > 0.0);
}

TEST_CASE("mask decoder range and sensitivity") {
    nn::ParamStore store(31);
    SegmentationBackend be(store, BackendConfig{});
    std::mt19937_64 rng(31);
    const auto emb = be.encode(uniform(rng, {1, 8, 8}));
    for (int trial = 0; trial < 100; ++trial) {
        const auto m = be.decode(emb, uniform(rng, {40, 32}, -2, 2));
        REQUIRE(m.shape() == Shape{1, 8, 8});
        for (double v : m.data()) CHECK((v >= 0.0 && v <= 1.0));
    }
    const auto a = be.decode(emb, uniform(rng, {40, 32}, -1, 1)), b = be.decode(emb, uniform(rng, {40, 32}, -1, 1));
    CHECK(oracle::linf(a, b) > 0.0);
    CHECK(values(be.decode(emb, Tensor::full({40, 32}, 0.1))) == values(be.decode(emb, Tensor::full({40, 32}, 0.1))));
    CHECK_THROWS_AS(be.decode(emb, uniform(rng, {40, 16})), ShapeError);
}

TEST_CASE("mask decoder gradient at 16x16") {
    nn::ParamStore store(32);
    SegmentationBackend be(store, BackendConfig{});
    std::mt19937_64 rng(32);
    auto emb = be.encode(uniform(rng, {1, 16, 16}));
    emb = Tensor::from(emb.shape(), values(emb), true);
    auto p = uniform(rng, {40, 32}, -0.5, 0.5);
    p.set_requires_grad(true);
    const auto fn = [&] { return weighted(be.decode(emb, p), 7); };
    CHECK(ad::grad_check_leaves(fn, ad::dominant_probes(fn, {{emb, 128}, {p, 128}}, 32)) < 1e-4);
}

TEST_CASE("combine_masks algebra") {
    std::mt19937_64 rng(33);
    const auto a = uniform(rng, {1, 8, 8}), b = uniform(rng, {1, 8, 8});
    CHECK(values(combine_masks(a, a)) == values(a));
    CHECK(values(combine_masks(Tensor::zeros({1, 8, 8}), a)) == values(a));
    CHECK(values(combine_masks(a, b)) == values(combine_masks(b, a)));
    CHECK_THROWS_AS(combine_masks(a, Tensor::zeros({1, 4, 8})), ShapeError);
}

}
