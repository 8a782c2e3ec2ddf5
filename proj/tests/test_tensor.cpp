// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/grad_check.hpp"
#include "ctrlfuse/ops.hpp"
#include "doctest.h"

using namespace ctrlfuse;
using namespace ctrlfuse::ad;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad = true) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = n(rng);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Weighted sum so every output coordinate gets a distinct, O(1) gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum(mul(y, random_tensor(rng, y.shape(), false)));
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("elementwise examples") {
    const auto a = Tensor::from({2}, {1, 2}), b = Tensor::from({2}, {3, 4});
    CHECK(values(mul(a, b)) == std::vector<double>{3, 8});
    CHECK(values(add(a, b)) == std::vector<double>{4, 6});
    CHECK(values(sub(a, b)) == std::vector<double>{-2, -2});
    CHECK(values(scale(a, 0.5)) == std::vector<double>{0.5, 1});
    CHECK(values(leaky_relu(Tensor::from({2}, {-1, 2}))) == std::vector<double>{-0.2, 2});
    CHECK(sigmoid(Tensor::scalar(0)).item() == 0.5);
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("product rule and max tie") {
    auto a = Tensor::from({1}, {2}, true), b = Tensor::from({1}, {5}, true);
    backward(sum(mul(a, b)));
    CHECK(a.grad() == std::vector<double>{5});
    CHECK(b.grad() == std::vector<double>{2});

    auto x = Tensor::from({3}, {1, -2, 3}, true);
    const auto m = maximum(x, x);
    CHECK(values(m) == values(x));
    backward(sum(m));
    CHECK(x.grad() == std::vector<double>{1, 1, 1});  // both routes land on x; the tie goes to the first operand

    auto p = Tensor::from({2}, {1, 4}, true), q = Tensor::from({2}, {1, 2}, true);
    backward(sum(maximum(p, q)));
    CHECK(p.grad() == std::vector<double>{1, 1});
    CHECK(q.grad() == std::vector<double>{0, 0});
}

TEST_CASE("trailing-1 and scalar broadcasting") {
    const auto x = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(values(add(x, Tensor::scalar(1))) == std::vector<double>{2, 3, 4, 5});
    CHECK(values(mul(x, Tensor::from({2, 1}, {10, 100}))) == std::vector<double>{10, 20, 300, 400});
    CHECK_THROWS_AS(add(x, Tensor::from({1, 2}, {1, 2})), ShapeError);
}

TEST_CASE("matmul examples and gradient") {
    const auto i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
    const auto b = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(values(matmul(i2, b)) == values(b));
    CHECK(values(matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1}))) ==
          std::vector<double>{3, 7});
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);

    std::mt19937_64 rng(11);
    auto a = random_tensor(rng, {5, 4});
    auto c = random_tensor(rng, {4, 3});
    CHECK(grad_check_leaves([&] { return probe(matmul(a, c), 1); }, {{a, {}}, {c, {}}}) < 1e-6);
}

TEST_CASE("conv2d examples and gradient") {
    std::mt19937_64 rng(5);
    const auto x = random_tensor(rng, {2, 5, 5}, false);
    const auto eye = Tensor::from({2, 2, 1, 1}, {1, 0, 0, 1});
    CHECK(values(conv2d(x, eye, Tensor(), 1, 0)) == values(x));

    const auto c = Tensor::full({1, 6, 6}, 0.7);
    const auto box = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
    const auto y = conv2d(c, box, Tensor(), 1, 1);
    for (std::size_t r = 1; r < 5; ++r)
        for (std::size_t q = 1; q < 5; ++q) CHECK(y.data()[r * 6 + q] == doctest::Approx(0.7).epsilon(1e-14));
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 3, 3, 3}), Tensor(), 1, 1), ShapeError);

    auto in = random_tensor(rng, {4, 8, 8});
    auto w = random_tensor(rng, {3, 4, 3, 3});
    auto bias = random_tensor(rng, {3});
    CHECK(grad_check_leaves([&] { return probe(conv2d(in, w, bias, 1, 1), 2); }, {{in, {}}, {w, {}}, {bias, {}}}) <
          1e-4);
}

TEST_CASE("pooling examples") {
    CHECK(global_avg_pool(Tensor::zeros({2, 4, 4})).data()[0] == 0.0);
    CHECK(global_avg_pool(Tensor::full({2, 4, 4}, 1.0)).data()[1] == 1.0);
    CHECK(avg_pool2d(Tensor::from({1, 2, 2}, {1, 2, 3, 4}), 2).item() == 2.5);
    // 3x3 with window 2: the ragged edge replicates the last row/column.
    const auto p = avg_pool2d(Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}), 2);
    CHECK(p.shape() == Shape{1, 2, 2});
    CHECK(values(p) == std::vector<double>{3, 4.5, 7.5, 9});
    auto x = Tensor::from({1, 2, 2}, {1, 2, 3, 4}, true);
    backward(avg_pool2d(x, 2));
    CHECK(x.grad() == std::vector<double>{0.25, 0.25, 0.25, 0.25});
}

TEST_CASE("attention examples and gradient") {
    std::mt19937_64 rng(9);
    const auto q = random_tensor(rng, {3, 4}, false);
    const auto k = random_tensor(rng, {1, 4}, false);
    const auto v = Tensor::from({1, 4}, {1, 2, 3, 4});
    const auto out = attention(q, k, v);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c) CHECK(out.data()[r * 4 + c] == doctest::Approx(v.data()[c]).epsilon(1e-15));

    // One-hot-dominant logits: q = k = 100 * I, so row i attends to v row i.
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[i * 5] = 100.0;
    const auto qk = Tensor::from({4, 4}, eye);
    const auto vv = random_tensor(rng, {4, 4}, false);
    const auto sat = attention(qk, qk, vv);
    for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(sat.data()[i] - vv.data()[i]) < 1e-6);

    CHECK_THROWS_AS(attention(Tensor::zeros({2, 4}), Tensor::zeros({3, 5}), Tensor::zeros({3, 5})), ShapeError);

    auto aq = random_tensor(rng, {3, 4}), ak = random_tensor(rng, {5, 4}), av = random_tensor(rng, {5, 4});
    CHECK(grad_check_leaves([&] { return probe(attention(aq, ak, av), 3); }, {{aq, {}}, {ak, {}}, {av, {}}}) < 1e-4);
}

TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(2);
    const auto s = softmax_rows(scale(random_tensor(rng, {6, 9}, false), 10.0));
    for (std::size_t r = 0; r < 6; ++r) {
        double t = 0;
        for (std::size_t c = 0; c < 9; ++c) t += s.data()[r * 9 + c];
        CHECK(std::abs(t - 1.0) <= 1e-12);
    }
}

TEST_CASE("reshape family round trips") {
    std::mt19937_64 rng(4);
    const auto x = random_tensor(rng, {3, 4, 5}, false);
    const auto flat = flatten_spatial(x);
    CHECK(flat.shape() == Shape{20, 3});
    CHECK(values(view_spatial(flat, 4, 5)) == values(x));

    const auto c = Tensor::full({2, 4, 4}, 0.3);
    CHECK(values(upsample_nearest(downsample_avg(c), 2)) == values(c));

    const auto a = Tensor::zeros({2, 4, 4}), b = Tensor::full({3, 4, 4}, 1.0);
    const auto cat = concat_channels({a, b});
    CHECK(cat.shape() == Shape{5, 4, 4});
    CHECK(values(slice_channels(cat, 2, 5)) == values(b));
    CHECK(values(slice_channels(cat, 0, 2)) == values(a));
    CHECK_THROWS_AS(concat_channels({Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 4, 3})}), ShapeError);
}

TEST_CASE("backward examples") {
    auto x = Tensor::from({3}, {1, 2, 3}, true);
    backward(sum(x));
    CHECK(x.grad() == std::vector<double>{1, 1, 1});

    auto s = Tensor::scalar(3.0, true);
    backward(square(s));
    CHECK(s.grad() == std::vector<double>{6});

    CHECK_THROWS_AS(backward(Tensor::from({2}, {1, 2}, true)), ContractError);
}

TEST_CASE("fan-out accumulates both contributions") {
    auto x = Tensor::from({2}, {1, 2}, true);
    const auto y = add(mul(x, x), scale(x, 3.0));  // x feeds three edges
    backward(sum(y));
    CHECK(x.grad() == std::vector<double>{5, 7});
    backward(sum(x));  // leaf grads accumulate across calls
    CHECK(x.grad() == std::vector<double>{6, 8});
}

TEST_CASE("no-grad guard records nothing") {
    auto x = Tensor::from({2}, {1, 2}, true);
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        const auto y = sum(square(x));
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
}

TEST_CASE("composite conv -> attention -> mean") {
    std::mt19937_64 rng(21);
    auto img = random_tensor(rng, {2, 4, 4});
    auto w = random_tensor(rng, {3, 2, 3, 3});
    auto wq = random_tensor(rng, {3, 3});
    const auto f = [&] {
        const auto tokens = flatten_spatial(leaky_relu(conv2d(img, w, Tensor(), 1, 1)));
        return mean(mul(attention(matmul(tokens, wq), tokens, tokens), add_scalar(tokens, 0.5)));
    };
    CHECK(grad_check_leaves(f, {{img, {}}, {w, {}}, {wq, {}}}) < 1e-4);
}

TEST_CASE("grad_check harness examples") {
    std::mt19937_64 rng(8);
    const auto x = random_tensor(rng, {6});
    CHECK(grad_check([](const Tensor& t) { return sum(t); }, x) < 1e-10);

    auto zero = Tensor::zeros({4}, true);
    backward(sum(sigmoid(zero)));
    for (double g : zero.grad()) CHECK(g == 0.25);
    CHECK(grad_check([](const Tensor& t) { return sum(sigmoid(t)); }, Tensor::zeros({4}, true)) < 1e-8);
    CHECK(relative_error(1.0, 1.0) == 0.0);
    CHECK(relative_error(0.0, 1e-9) == doctest::Approx(0.1));
}

}
