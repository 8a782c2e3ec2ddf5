// SPDX-License-Identifier: Apache-2.0
//
// Frozen promptable segmentation stand-in: a strided conv image encoder, a
// prompt projection and a two-round token/grid cross-attention mask decoder.
// Every weight is generated from the model seed and never trained; inputs
// still receive gradients.
#pragma once

#include <cstddef>

#include "ctrlfuse/nn.hpp"

namespace ctrlfuse {

using ad::Tensor;

struct BackendConfig {
    std::size_t prompt_channels = 16;  // width of P' (encoder channels)
    std::size_t embed_dim = 32;        // D_sam
    std::size_t heads = 1;
};

class SegmentationBackend {
public:
    SegmentationBackend(nn::ParamStore& store, const BackendConfig& cfg);

    /// 1 x H x W image -> D_sam x H/4 x W/4 embedding. H and W must be
    /// multiples of 4.
    Tensor encode(const Tensor& image) const;

    /// P' (N x C) -> P (N x D_sam).
    Tensor project_prompt(const Tensor& p_prime) const { return prompt_projection_(p_prime); }

    /// Mask probabilities 1 x (4h) x (4w) for a D_sam x h x w embedding and
    /// N x D_sam prompt tokens.
    Tensor decode(const Tensor& embedding, const Tensor& prompt) const;

    const BackendConfig& config() const { return cfg_; }

private:
    BackendConfig cfg_;
    nn::Conv2d enc1_, enc2_, enc3_;
    nn::Linear prompt_projection_;
    nn::AttentionBlock token_to_grid1_, grid_to_token1_, token_to_grid2_, grid_to_token2_;
    nn::Linear mask_head_;
};

/// Pixelwise maximum of the two branch masks.
Tensor combine_masks(const Tensor& m_ir, const Tensor& m_vis);

}  // namespace ctrlfuse
