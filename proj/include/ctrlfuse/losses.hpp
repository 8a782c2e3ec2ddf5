// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. All image arguments are 1 x H x W in [0, 1]; the
// visible image enters as its luminance.
//
//   total  = fusion + seg
//   fusion = pixel + grad + int + percep
//   seg    = bce + dice   (each averaged over the segmentation branches)
#pragma once

#include <cstdint>
#include <vector>

#include "ctrlfuse/nn.hpp"

namespace ctrlfuse {

using ad::Tensor;

/// Four frozen stages of 3x3 conv + leaky_relu + 2x average pooling; the
/// stage outputs are the feature maps compared by the perceptual loss.
class FrozenPerceptualNet {
public:
    explicit FrozenPerceptualNet(std::uint64_t seed);

    std::vector<Tensor> features(const Tensor& image) const;
    std::uint64_t checksum() const { return store_.checksum(true); }

private:
    nn::ParamStore store_;
    std::vector<nn::Conv2d> stages_;
};

/// 3x3 Sobel gradient magnitude sqrt(gx^2 + gy^2 + 1e-12), replicate padding.
Tensor sobel_magnitude(const Tensor& image);

Tensor pixel_loss(const Tensor& i_f, const Tensor& i_ir, const Tensor& i_vis_y, const Tensor& i_seg);
Tensor grad_loss(const Tensor& i_f, const Tensor& i_ir, const Tensor& i_vis_y);
Tensor int_loss(const Tensor& i_f, const Tensor& i_ir, const Tensor& i_vis_y);
Tensor perceptual_loss(const Tensor& i_f, const Tensor& i_ir, const Tensor& i_vis_y, const FrozenPerceptualNet& net);
/// Predictions are clipped to [1e-7, 1 - 1e-7] before the logs.
Tensor bce_loss(const Tensor& pred, const Tensor& target);
/// 1 - 2 sum(p y) / (sum p^2 + sum y^2), evaluated as
/// sum (p - y)^2 / (sum p^2 + sum y^2 + 1e-12) so identical inputs give 0.
Tensor dice_loss(const Tensor& pred, const Tensor& target);

struct LossInputs {
    Tensor i_f;
    Tensor i_ir;
    Tensor i_vis_y;
    Tensor i_seg;                      // combined mask (zeros when absent)
    std::vector<Tensor> branch_masks;  // M_ir and/or M_vis
    Tensor target;                     // prompt ground truth, 1 x H x W
    bool include_seg = true;
};

struct LossTerms {
    Tensor pixel, grad, intensity, percep, bce, dice, fusion, seg, total;
};

/// Scalar view of one evaluation.
struct LossBreakdown {
    double pixel = 0, grad = 0, intensity = 0, percep = 0, bce = 0, dice = 0;
    double fusion_total = 0, seg_total = 0, total = 0;

    static LossBreakdown from(const LossTerms& terms);
    LossBreakdown& operator+=(const LossBreakdown& other);
    LossBreakdown scaled(double factor) const;
};

LossTerms total_loss(const LossInputs& in, const FrozenPerceptualNet& net);

}  // namespace ctrlfuse
