// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/segmentation.hpp"

#include <cmath>

#include "ctrlfuse/errors.hpp"

namespace ctrlfuse {

using namespace ad;

SegmentationBackend::SegmentationBackend(nn::ParamStore& store, const BackendConfig& cfg) : cfg_(cfg) {
    const bool trainable = false;
    const std::size_t d = cfg.embed_dim;
    enc1_ = nn::make_conv(store, "sam.enc1", 1, d / 4, 3, 2, true, trainable);
    enc2_ = nn::make_conv(store, "sam.enc2", d / 4, d / 2, 3, 2, true, trainable);
    enc3_ = nn::make_conv(store, "sam.enc3", d / 2, d, 3, 1, true, trainable);
    prompt_projection_ = nn::make_linear(store, "sam.prompt_proj", cfg.prompt_channels, d, false, trainable);
    token_to_grid1_ = nn::make_attention(store, "sam.t2g1", d, d, d, cfg.heads, trainable);
    grid_to_token1_ = nn::make_attention(store, "sam.g2t1", d, d, d, cfg.heads, trainable);
    token_to_grid2_ = nn::make_attention(store, "sam.t2g2", d, d, d, cfg.heads, trainable);
    grid_to_token2_ = nn::make_attention(store, "sam.g2t2", d, d, d, cfg.heads, trainable);
    mask_head_ = nn::make_linear(store, "sam.mask_head", d, d, false, trainable);
}

Tensor SegmentationBackend::encode(const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(0) != 1) throw ShapeError("backend encoder expects 1 x H x W");
    if (image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0)
        throw ShapeError("backend encoder needs H and W divisible by 4, got " + ad::to_string(image.shape()));
    Tensor x = leaky_relu(enc1_(image));
    x = leaky_relu(enc2_(x));
    return enc3_(x);
}

Tensor SegmentationBackend::decode(const Tensor& embedding, const Tensor& prompt) const {
    if (embedding.ndim() != 3 || embedding.dim(0) != cfg_.embed_dim)
        throw ShapeError("mask decoder expects a D_sam x h x w embedding");
    if (prompt.ndim() != 2 || prompt.dim(1) != cfg_.embed_dim)
        throw ShapeError("mask decoder expects N x D_sam prompt tokens, got " + ad::to_string(prompt.shape()));
    const std::size_t h = embedding.dim(1), w = embedding.dim(2);
    Tensor grid = flatten_spatial(embedding);
    Tensor tokens = prompt;
    tokens = add(tokens, token_to_grid1_(tokens, grid));
    grid = add(grid, grid_to_token1_(grid, tokens));
    tokens = add(tokens, token_to_grid2_(tokens, grid));
    grid = add(grid, grid_to_token2_(grid, tokens));
    // One mask query from the pooled tokens, scored against every grid cell.
    const Tensor query = mask_head_(mean_rows(tokens));
    Tensor logits = scale(matmul(grid, transpose(query)), 1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim)));
    logits = upsample_nearest(view_spatial(logits, h, w), 4);
    return sigmoid(logits);
}

Tensor combine_masks(const Tensor& m_ir, const Tensor& m_vis) {
    if (m_ir.shape() != m_vis.shape()) throw ShapeError("combine_masks: shapes differ");
    return maximum(m_ir, m_vis);
}

}  // namespace ctrlfuse
