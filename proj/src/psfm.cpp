// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/psfm.hpp"

#include <cmath>

#include "ctrlfuse/errors.hpp"

namespace ctrlfuse {

using namespace ad;

void IntensityControl::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ContractError("alpha must be a finite value >= 0");
}

PromptSemanticFusion::PromptSemanticFusion(nn::ParamStore& store, const std::string& name, std::size_t channels,
                                           std::size_t prompt_dim, std::size_t heads)
    : attn_(nn::make_attention(store, name + ".attn", channels, prompt_dim, channels, heads)) {}

Tensor PromptSemanticFusion::enhanced(const FeatureMap& f, const Tensor& prompt) const {
    const std::size_t h = f.height(), w = f.width();
    const Tensor down = downsample_avg(f.values);
    const Tensor seq = flatten_spatial(down);
    const Tensor attended = attn_(seq, prompt);
    return crop_spatial(upsample_nearest(view_spatial(attended, down.dim(1), down.dim(2)), 2), h, w);
}

FeatureMap PromptSemanticFusion::forward(const FeatureMap& f, const Tensor& prompt, const Tensor& mask) const {
    if (mask.ndim() != 3 || mask.dim(0) != 1 || mask.dim(1) != f.height() || mask.dim(2) != f.width())
        throw ShapeError("PSFM mask must be 1 x H x W matching the features, got " + ad::to_string(mask.shape()));
    return {mul(broadcast_channels(mask, f.channels()), enhanced(f, prompt))};
}

FeatureComposer::FeatureComposer(nn::ParamStore& store, const std::string& name, std::size_t channels,
                                 std::size_t ref_channels)
    : proj_ir_(nn::make_conv(store, name + ".proj_ir", channels, ref_channels, 1, 1, false)),
      proj_vis_(nn::make_conv(store, name + ".proj_vis", channels, ref_channels, 1, 1, false)) {}

Tensor FeatureComposer::prompt_delta(const FeatureMap* fp_ir, const FeatureMap* fp_vis) const {
    Tensor delta;
    if (fp_ir != nullptr) delta = proj_ir_(fp_ir->values);
    if (fp_vis != nullptr) {
        const Tensor v = proj_vis_(fp_vis->values);
        delta = delta.defined() ? add(delta, v) : v;
    }
    return delta;
}

FeatureMap FeatureComposer::compose(const FeatureMap& f_ref, const FeatureMap* fp_ir, const FeatureMap* fp_vis,
                                    const IntensityControl& ctrl) const {
    ctrl.validate();
    if (ctrl.alpha == 0.0 || (fp_ir == nullptr && fp_vis == nullptr)) return f_ref;
    const Tensor delta = prompt_delta(fp_ir, fp_vis);
    if (delta.shape() != f_ref.values.shape())
        throw ShapeError("prompt features do not match F_ref: " + ad::to_string(delta.shape()) + " vs " +
                         ad::to_string(f_ref.values.shape()));
    return {add(f_ref.values, scale(delta, ctrl.alpha))};
}

}  // namespace ctrlfuse
