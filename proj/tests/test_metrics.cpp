// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>
#include <sstream>

#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/metrics.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace ctrlfuse;

TEST_SUITE("metrics") {

TEST_CASE("metrics agree with naive oracles on random 16x16 triples") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        std::mt19937_64 rng(seed);
        const bool smooth = seed % 2 == 1;
        const auto f = oracle::random_image(rng, 16, 16, smooth);
        const auto a = oracle::random_image(rng, 16, 16, smooth);
        const auto b = oracle::random_image(rng, 16, 16, !smooth);
        const auto tf = oracle::to_tensor(f), ta = oracle::to_tensor(a), tb = oracle::to_tensor(b);
        CAPTURE(seed);
        CHECK(metrics::mse(tf, ta) == doctest::Approx(oracle::mse(f, a)).epsilon(1e-9));
        CHECK(metrics::psnr(tf, ta) == doctest::Approx(oracle::psnr(f, a)).epsilon(1e-9));
        CHECK(metrics::ssim(tf, ta) == doctest::Approx(oracle::ssim(f, a)).epsilon(1e-9));
        CHECK(metrics::ssim_block(tf, ta) == doctest::Approx(oracle::ssim_block(f, a)).epsilon(1e-9));
        CHECK(metrics::qabf(tf, ta, tb) == doctest::Approx(oracle::qabf(f, a, b)).epsilon(1e-9));
        CHECK(metrics::qabf_block(tf, ta, tb) == doctest::Approx(oracle::qabf_block(f, a, b)).epsilon(1e-9));
        CHECK(metrics::nabf(tf, ta, tb) == doctest::Approx(oracle::nabf(f, a, b)).epsilon(1e-9));
        CHECK(metrics::scd(tf, ta, tb) == doctest::Approx(oracle::scd(f, a, b)).epsilon(1e-9));
        CHECK(metrics::scd_block(tf, ta, tb) == doctest::Approx(oracle::scd_block(f, a, b)).epsilon(1e-9));
    }
}

TEST_CASE("block metrics handle ragged edge tiles") {
    std::mt19937_64 rng(7);
    const auto f = oracle::random_image(rng, 20, 12), a = oracle::random_image(rng, 20, 12),
               b = oracle::random_image(rng, 20, 12);
    const auto tf = oracle::to_tensor(f), ta = oracle::to_tensor(a), tb = oracle::to_tensor(b);
    CHECK(metrics::ssim_block(tf, ta) == doctest::Approx(oracle::ssim_block(f, a)).epsilon(1e-9));
    CHECK(metrics::nabf(tf, ta, tb) == doctest::Approx(oracle::nabf(f, a, b)).epsilon(1e-9));
    CHECK(metrics::scd_block(tf, ta, tb) == doctest::Approx(oracle::scd_block(f, a, b)).epsilon(1e-9));
}

TEST_CASE("identity cases") {
    std::mt19937_64 rng(3);
    const auto x = oracle::to_tensor(oracle::random_image(rng, 16, 16));
    CHECK(metrics::mse(x, x) == 0.0);
    CHECK(metrics::psnr(x, x) == 100.0);
    CHECK(metrics::ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(metrics::psnr_from_mse(1e-30) == 100.0);
    CHECK(metrics::psnr_from_mse(0.01) == doctest::Approx(20.0));
}

TEST_CASE("qabf is zero without source edges") {
    const auto flat = ad::Tensor::full({1, 16, 16}, 0.5);
    CHECK(metrics::qabf(flat, flat, flat) == 0.0);
}

TEST_CASE("pearson of constant input is zero") {
    const double a[4] = {1, 1, 1, 1}, b[4] = {0, 1, 2, 3};
    CHECK(metrics::pearson(a, b, 4) == 0.0);
    CHECK(metrics::pearson(b, b, 4) == doctest::Approx(1.0));
}

TEST_CASE("iou matches oracle and skips classes absent from both maps") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> cls(0, 2);
        std::vector<std::uint8_t> pred(256), gt(256);
        for (std::size_t i = 0; i < 256; ++i) {
            pred[i] = static_cast<std::uint8_t>(cls(rng));
            gt[i] = static_cast<std::uint8_t>(seed % 5 == 0 ? cls(rng) % 2 : cls(rng));
        }
        const auto r = metrics::iou_miou(pred, gt, 4);
        const auto o = oracle::iou(pred, gt, 4);
        CAPTURE(seed);
        CHECK(r.miou == doctest::Approx(o.miou).epsilon(1e-9));
        REQUIRE(r.per_class.size() == o.per_class.size());
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(r.per_class[c].has_value() == o.per_class[c].has_value());
            if (r.per_class[c] && o.per_class[c]) CHECK(*r.per_class[c] == doctest::Approx(*o.per_class[c]));
        }
        CHECK_FALSE(r.per_class[3].has_value());
    }
}

TEST_CASE("iou hand example") {
    // gt:   0 0 1 1    pred: 0 1 1 1
    const std::vector<std::uint8_t> gt{0, 0, 1, 1}, pred{0, 1, 1, 1};
    const auto r = metrics::iou_miou(pred, gt, 2);
    CHECK(*r.per_class[0] == doctest::Approx(0.5));
    CHECK(*r.per_class[1] == doctest::Approx(2.0 / 3.0));
    CHECK(r.miou == doctest::Approx((0.5 + 2.0 / 3.0) / 2));
}

TEST_CASE("mse and psnr worked examples") {
    const auto a = ad::Tensor::from({1, 2, 2}, {0, 1, 1, 0}), b = ad::Tensor::from({1, 2, 2}, {1, 1, 0, 0});
    CHECK(metrics::mse(a, b) == 0.5);
    CHECK(metrics::mse(b, a) == metrics::mse(a, b));
    CHECK(metrics::psnr_from_mse(0.25) == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-12));
    CHECK(metrics::psnr_from_mse(0.25) == doctest::Approx(6.0206).epsilon(1e-5));
}

TEST_CASE("ssim of two constants reduces to the luminance factor") {
    for (const double c : {0.0, 0.1, 0.3, 0.5}) {
        const auto x = ad::Tensor::full({1, 16, 16}, c), y = ad::Tensor::full({1, 16, 16}, c + 0.5);
        const double c1 = 0.0001, mx = c, my = c + 0.5;
        // Both variances and the covariance vanish, so the structure factor is C2 / C2.
        const double expected = (2 * mx * my + c1) / (mx * mx + my * my + c1);
        CAPTURE(c);
        CHECK(metrics::ssim(x, y) == doctest::Approx(expected).epsilon(1e-12));
        CHECK(metrics::ssim(y, x) == metrics::ssim(x, y));
    }
}

TEST_CASE("qabf_block of identical inputs is one") {
    std::mt19937_64 rng(11);
    const auto x = oracle::to_tensor(oracle::random_image(rng, 16, 16, true));
    CHECK(metrics::qabf_block(x, x, x) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("qabf of a flat fusion of edged sources is near zero") {
    // Vertical step in ir, horizontal step in vis.
    std::vector<double> ir(256), vis(256);
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
            ir[y * 16 + x] = x < 8 ? 0.1 : 0.9;
            vis[y * 16 + x] = y < 8 ? 0.2 : 0.7;
        }
    const auto ti = ad::Tensor::from({1, 16, 16}, ir), tv = ad::Tensor::from({1, 16, 16}, vis);
    const auto flat = ad::Tensor::full({1, 16, 16}, 0.5);
    const double q = metrics::qabf(flat, ti, tv);
    CHECK(q == doctest::Approx(oracle::qabf(oracle::to_image(flat), oracle::to_image(ti), oracle::to_image(tv)))
                   .epsilon(1e-9));
    CHECK(q < 0.05);
    CHECK(metrics::qabf(ti, ti, tv) > 0.3);
}

TEST_CASE("qabf stays in the unit interval") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        const auto f = oracle::to_tensor(oracle::random_image(rng, 16, 16, seed % 3 == 0));
        const auto a = oracle::to_tensor(oracle::random_image(rng, 16, 16, seed % 2 == 0));
        const auto b = oracle::to_tensor(oracle::random_image(rng, 16, 16));
        const double q = metrics::qabf(f, a, b);
        CAPTURE(seed);
        CHECK(q >= 0.0);
        CHECK(q <= 1.0);
    }
}

TEST_CASE("nabf rises with impulse noise and vanishes for a flat fusion") {
    std::mt19937_64 rng(12);
    const auto a = oracle::to_tensor(oracle::random_image(rng, 16, 16));
    const auto b = oracle::to_tensor(oracle::random_image(rng, 16, 16));
    CHECK(metrics::nabf(ad::Tensor::full({1, 16, 16}, 0.4), a, b) == 0.0);

    const auto clean = oracle::random_image(rng, 16, 16, true);
    auto noisy = clean;
    std::uniform_int_distribution<int> pick(0, 15);
    for (int k = 0; k < 25; ++k) noisy[pick(rng)][pick(rng)] = k % 2 == 0 ? 0.0 : 1.0;
    const double nc = metrics::nabf(oracle::to_tensor(clean), a, b);
    const double nn = metrics::nabf(oracle::to_tensor(noisy), a, b);
    CHECK(nn == doctest::Approx(oracle::nabf(noisy, oracle::to_image(a), oracle::to_image(b))).epsilon(1e-9));
    CHECK(nn > nc);
    CHECK(metrics::nabf(oracle::to_tensor(clean), b, a) == nc);
}

TEST_CASE("scd examples") {
    std::mt19937_64 rng(13);
    const auto ir = oracle::random_image(rng, 16, 16), vis = oracle::random_image(rng, 16, 16);
    oracle::Image avg = ir;
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) avg[y][x] = (ir[y][x] + vis[y][x]) / 2;
    const auto tf = oracle::to_tensor(avg), ti = oracle::to_tensor(ir), tv = oracle::to_tensor(vis);
    const double s = metrics::scd(tf, ti, tv);
    CHECK(s == doctest::Approx(oracle::scd(avg, ir, vis)).epsilon(1e-9));
    // F - vis = (ir - vis)/2 correlates positively with ir for independent fields.
    CHECK(s > 0.5);
    CHECK(metrics::scd(tf, tv, ti) == doctest::Approx(s).epsilon(1e-12));

    // Identical nonconstant inputs: both differences are zero-variance.
    CHECK(metrics::scd(ti, ti, ti) == 0.0);

    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        std::mt19937_64 r(seed);
        const auto f = oracle::to_tensor(oracle::random_image(r, 16, 16));
        const auto a = oracle::to_tensor(oracle::random_image(r, 16, 16));
        const auto b = oracle::to_tensor(oracle::random_image(r, 16, 16));
        const double v = metrics::scd(f, a, b);
        CHECK(v >= -2.0);
        CHECK(v <= 2.0);
    }
}

TEST_CASE("iou area examples") {
    std::vector<std::uint8_t> gt(64, 0), pred(64, 0), far(64, 0);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
            if (x < 4) gt[y * 8 + x] = 1;
            if (x >= 2 && x < 6) pred[y * 8 + x] = 1;
            if (x >= 6) far[y * 8 + x] = 1;
        }
    // Overlap of two 4-column bands shifted by half: 2 / 6 columns.
    CHECK(*metrics::iou_miou(pred, gt, 2).per_class[1] == doctest::Approx(1.0 / 3.0));
    CHECK(*metrics::iou_miou(far, gt, 2).per_class[1] == 0.0);
    const auto same = metrics::iou_miou(gt, gt, 2);
    CHECK(*same.per_class[0] == 1.0);
    CHECK(*same.per_class[1] == 1.0);
    CHECK(same.miou == 1.0);
}

TEST_CASE("shape errors") {
    const auto a = ad::Tensor::zeros({1, 8, 8}), b = ad::Tensor::zeros({1, 8, 4}), c = ad::Tensor::zeros({3, 8, 8});
    CHECK_THROWS_AS(metrics::mse(a, b), ShapeError);
    CHECK_THROWS_AS(metrics::ssim(c, c), ShapeError);
    CHECK_THROWS_AS(metrics::iou_miou({0}, {0, 1}, 2), ShapeError);
    CHECK_THROWS_AS(metrics::iou_miou({5}, {0}, 2), ContractError);
}

TEST_CASE("csv and aggregate json") {
    std::vector<metrics::NamedReport> reps{{"a", {1, 2, 3, 4, 5, 6}}, {"b", {3, 4, 5, 6, 7, 8}}};
    std::ostringstream csv;
    metrics::write_csv(csv, reps);
    CHECK(csv.str() == "image_id,mse,psnr,qabf,nabf,ssim,scd\na,1,2,3,4,5,6\nb,3,4,5,6,7,8\n");
    const auto m = metrics::aggregate_mean(reps);
    CHECK(m.mse == 2.0);
    CHECK(m.scd == 7.0);
    CHECK(metrics::aggregate_json(reps).find("\"count\": 2") != std::string::npos);
}

}
