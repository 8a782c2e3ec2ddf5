// SPDX-License-Identifier: Apache-2.0
//
// Reference prompt encoder: turns a user mask plus support/query features
// into N prompt tokens for the segmentation backend.
//
//   F_t    = global_avg_pool(mask * F_support)
//   F_supp = lrelu(conv3x3(concat(F_support, F_t)))
//   F_qry  = lrelu(conv3x3(concat(F_ref, F_t)))
//   Q'     = self1(cross1(Q, flatten(F_supp)))
//   P'     = self2(cross2(Q', flatten(F_qry)))
//   P      = frozen_projection(P')
#pragma once

#include <cstddef>
#include <string>
#include <span>
#include <utility>

#include "ctrlfuse/backbone.hpp"
#include "ctrlfuse/segmentation.hpp"

namespace ctrlfuse {

/// Binary H x W region of interest, stored as 1 x H x W.
class PromptMask {
public:
    /// Values are binarised at 0.5 (>= 0.5 selects the pixel).
    static PromptMask from_values(std::size_t h, std::size_t w, std::span<const double> values);
    static PromptMask empty(std::size_t h, std::size_t w);
    static PromptMask full(std::size_t h, std::size_t w);

    const Tensor& tensor() const { return mask_; }
    std::size_t height() const { return mask_.dim(1); }
    std::size_t width() const { return mask_.dim(2); }
    std::size_t count() const;

private:
    explicit PromptMask(Tensor mask) : mask_(std::move(mask)) {}
    Tensor mask_;
};

struct RpeConfig {
    std::size_t channels = 16;      // C: modality feature width and attention width
    std::size_t ref_channels = 32;  // F_ref width
    std::size_t n_queries = 40;
    std::size_t heads = 1;
    bool exchange_sq = false;       // F_ref feeds the support path, F_modality the query path
};

class ReferencePromptEncoder {
public:
    ReferencePromptEncoder(nn::ParamStore& store, const std::string& name, const RpeConfig& cfg,
                           const SegmentationBackend& backend);

    /// C x 1 x 1 target descriptor.
    static Tensor target_pool(const PromptMask& prompt, const FeatureMap& support);

    /// (F_supp, F_qry), both C x H x W.
    std::pair<FeatureMap, FeatureMap> build_support_query(const FeatureMap& f_modality, const FeatureMap& f_ref,
                                                          const Tensor& f_t) const;

    /// P' = N x C tokens before the frozen projection.
    Tensor encode_tokens(const FeatureMap& f_supp, const FeatureMap& f_qry) const;

    /// P = N x D_sam.
    Tensor encode_prompt(const FeatureMap& f_supp, const FeatureMap& f_qry) const;

    /// Full branch: mask + (F_modality, F_ref) -> P.
    Tensor forward(const PromptMask& prompt, const FeatureMap& f_modality, const FeatureMap& f_ref) const;

    const RpeConfig& config() const { return cfg_; }
    const Tensor& queries() const { return queries_; }

private:
    RpeConfig cfg_;
    const SegmentationBackend* backend_;
    Tensor queries_;  // N x C
    nn::Conv2d support_conv_, query_conv_;
    nn::AttentionBlock cross1_, self1_, cross2_, self2_;
};

}  // namespace ctrlfuse
