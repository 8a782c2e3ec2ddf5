// SPDX-License-Identifier: Apache-2.0
//
// Prompt-semantic fusion: every (downsampled) pixel attends to the prompt
// tokens, the result is brought back to full resolution and gated by the
// branch's predicted mask.
//
//   F_seq = flatten(avg_pool2(F))
//   F^p   = M * upsample2(view(cross(F_seq, P)))
#pragma once

#include <cstddef>
#include <string>

#include "ctrlfuse/backbone.hpp"

namespace ctrlfuse {

/// alpha >= 0 scales the prompt contribution at inference.
struct IntensityControl {
    double alpha = 1.0;

    void validate() const;
};

class PromptSemanticFusion {
public:
    PromptSemanticFusion(nn::ParamStore& store, const std::string& name, std::size_t channels,
                         std::size_t prompt_dim, std::size_t heads);

    /// Attended map before gating, C x H x W.
    Tensor enhanced(const FeatureMap& f, const Tensor& prompt) const;

    /// F^p = mask * enhanced(f, prompt); mask is 1 x H x W soft probabilities.
    FeatureMap forward(const FeatureMap& f, const Tensor& prompt, const Tensor& mask) const;

private:
    nn::AttentionBlock attn_;
};

/// F_final = F_ref + alpha * (proj_ir(F_ir^p) + proj_vis(F_vis^p)); either
/// branch may be absent (ablations). alpha == 0 returns F_ref itself.
class FeatureComposer {
public:
    FeatureComposer(nn::ParamStore& store, const std::string& name, std::size_t channels, std::size_t ref_channels);

    FeatureMap compose(const FeatureMap& f_ref, const FeatureMap* fp_ir, const FeatureMap* fp_vis,
                       const IntensityControl& ctrl) const;

    /// proj_ir(F_ir^p) + proj_vis(F_vis^p), the part alpha multiplies.
    Tensor prompt_delta(const FeatureMap* fp_ir, const FeatureMap* fp_vis) const;

private:
    nn::Conv2d proj_ir_, proj_vis_;
};

}  // namespace ctrlfuse
