// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/losses.hpp"

#include "ctrlfuse/backbone.hpp"
#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/rng.hpp"

namespace ctrlfuse {

using namespace ad;

namespace {

constexpr double kBceClip = 1e-7;
constexpr double kSobelEps = 1e-12;
constexpr double kDiceEps = 1e-12;

void require_same(const char* what, std::initializer_list<const Tensor*> ts) {
    const Shape& ref = (*ts.begin())->shape();
    if (ref.size() != 3 || ref[0] != 1) throw ShapeError(std::string(what) + ": expected 1 x H x W images");
    for (const Tensor* t : ts)
        if (t->shape() != ref)
            throw ShapeError(std::string(what) + ": misaligned inputs " + ad::to_string(ref) + " vs " +
                             ad::to_string(t->shape()));
}

// (1/HW) * ||x||_1
Tensor l1_mean(const Tensor& x) { return mean(abs(x)); }

}  // namespace

FrozenPerceptualNet::FrozenPerceptualNet(std::uint64_t seed) : store_(derive_seed(seed, "perceptual")) {
    const std::size_t widths[] = {1, 8, 16, 32, 64};
    for (std::size_t i = 0; i < 4; ++i)
        stages_.push_back(nn::make_conv(store_, "percep.stage" + std::to_string(i), widths[i], widths[i + 1], 3, 1,
                                        true, false));
}

std::vector<Tensor> FrozenPerceptualNet::features(const Tensor& image) const {
    std::vector<Tensor> out;
    Tensor x = image;
    for (const auto& s : stages_) {
        x = avg_pool2d(leaky_relu(s(x)), 2);
        out.push_back(x);
    }
    return out;
}

Tensor sobel_magnitude(const Tensor& image) {
    const Tensor gx = depthwise_conv2d(image, sobel_kernel_x(image.dim(0)), Padding::replicate);
    const Tensor gy = depthwise_conv2d(image, sobel_kernel_y(image.dim(0)), Padding::replicate);
    return ad::sqrt(add_scalar(add(square(gx), square(gy)), kSobelEps));
}

Tensor pixel_loss(const Tensor& i_f, const Tensor& i_ir, const Tensor& i_vis_y, const Tensor& i_seg) {
    require_same("pixel_loss", {&i_f, &i_ir, &i_vis_y, &i_seg});
    const Tensor object = mul(i_seg, sub(i_f, maximum(i_vis_y, i_ir)));
    const Tensor background_weight = add_scalar(scale(i_seg, -1.0), 1.0);
    const Tensor background = mul(background_weight, sub(i_f, scale(add(i_vis_y, i_ir), 0.5)));
    return add(l1_mean(object), l1_mean(background));
}

Tensor grad_loss(const Tensor& i_f, const Tensor& i_ir, const Tensor& i_vis_y) {
    require_same("grad_loss", {&i_f, &i_ir, &i_vis_y});
    return l1_mean(sub(sobel_magnitude(i_f), maximum(sobel_magnitude(i_vis_y), sobel_magnitude(i_ir))));
}

Tensor int_loss(const Tensor& i_f, const Tensor& i_ir, const Tensor& i_vis_y) {
    require_same("int_loss", {&i_f, &i_ir, &i_vis_y});
    return l1_mean(sub(i_f, maximum(i_ir, i_vis_y)));
}

Tensor perceptual_loss(const Tensor& i_f, const Tensor& i_ir, const Tensor& i_vis_y, const FrozenPerceptualNet& net) {
    require_same("perceptual_loss", {&i_f, &i_ir, &i_vis_y});
    const auto ff = net.features(i_f);
    const auto fi = net.features(i_ir);
    const auto fv = net.features(i_vis_y);
    Tensor ir_term = mean(square(sub(ff[0], fi[0])));
    for (std::size_t l = 1; l < ff.size(); ++l) ir_term = add(ir_term, mean(square(sub(ff[l], fi[l]))));
    Tensor vis_term = mean(square(sub(ff[0], fv[0])));
    for (std::size_t l = 1; l < ff.size(); ++l) vis_term = add(vis_term, mean(square(sub(ff[l], fv[l]))));
    return add(ir_term, vis_term);
}

Tensor bce_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) throw ShapeError("bce_loss: shapes differ");
    const Tensor p = clamp(pred, kBceClip, 1.0 - kBceClip);
    const Tensor one_minus_y = add_scalar(scale(target, -1.0), 1.0);
    const Tensor pos = mul(target, ad::log(p));
    const Tensor neg = mul(one_minus_y, ad::log(add_scalar(scale(p, -1.0), 1.0)));
    return scale(mean(add(pos, neg)), -1.0);
}

Tensor dice_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) throw ShapeError("dice_loss: shapes differ");
    const Tensor num = sum(square(sub(pred, target)));
    const Tensor den = add_scalar(add(sum(square(pred)), sum(square(target))), kDiceEps);
    return div(num, den);
}

LossBreakdown LossBreakdown::from(const LossTerms& t) {
    LossBreakdown b;
    b.pixel = t.pixel.item();
    b.grad = t.grad.item();
    b.intensity = t.intensity.item();
    b.percep = t.percep.item();
    b.bce = t.bce.item();
    b.dice = t.dice.item();
    b.fusion_total = t.fusion.item();
    b.seg_total = t.seg.item();
    b.total = t.total.item();
    return b;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
    pixel += o.pixel;
    grad += o.grad;
    intensity += o.intensity;
    percep += o.percep;
    bce += o.bce;
    dice += o.dice;
    fusion_total += o.fusion_total;
    seg_total += o.seg_total;
    total += o.total;
    return *this;
}

LossBreakdown LossBreakdown::scaled(double f) const {
    LossBreakdown b = *this;
    for (double* v : {&b.pixel, &b.grad, &b.intensity, &b.percep, &b.bce, &b.dice, &b.fusion_total, &b.seg_total,
                      &b.total})
        *v *= f;
    return b;
}

LossTerms total_loss(const LossInputs& in, const FrozenPerceptualNet& net) {
    LossTerms t;
    const Tensor i_seg = in.i_seg.defined() ? in.i_seg : Tensor::zeros(in.i_f.shape());
    t.pixel = pixel_loss(in.i_f, in.i_ir, in.i_vis_y, i_seg);
    t.grad = grad_loss(in.i_f, in.i_ir, in.i_vis_y);
    t.intensity = int_loss(in.i_f, in.i_ir, in.i_vis_y);
    t.percep = perceptual_loss(in.i_f, in.i_ir, in.i_vis_y, net);
    t.fusion = add(add(add(t.pixel, t.grad), t.intensity), t.percep);
    if (in.include_seg && !in.branch_masks.empty()) {
        if (!in.target.defined()) throw ContractError("segmentation loss needs a target mask");
        const double inv = 1.0 / static_cast<double>(in.branch_masks.size());
        Tensor bce = bce_loss(in.branch_masks[0], in.target);
        Tensor dice = dice_loss(in.branch_masks[0], in.target);
        for (std::size_t i = 1; i < in.branch_masks.size(); ++i) {
            bce = add(bce, bce_loss(in.branch_masks[i], in.target));
            dice = add(dice, dice_loss(in.branch_masks[i], in.target));
        }
        t.bce = scale(bce, inv);
        t.dice = scale(dice, inv);
    } else {
        t.bce = Tensor::scalar(0.0);
        t.dice = Tensor::scalar(0.0);
    }
    t.seg = add(t.bce, t.dice);
    t.total = add(t.fusion, t.seg);
    return t;
}

}  // namespace ctrlfuse
