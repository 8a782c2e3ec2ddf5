// SPDX-License-Identifier: Apache-2.0
//
// End-to-end controllable fusion network:
//
//   F_ir, F_vis = encoders(I_ir, I_vis)        F_ref = [F_ir; F_vis]
//   I_ref       = decode(F_ref)                E     = backend.encode(I_ref)
//   P_m         = rpe_m(Prompt, F_m, F_ref)    M_m   = backend.decode(E, P_m)
//   F_m^p       = psfm_m(F_m, P_m, M_m)        I_seg = max(M_ir, M_vis)
//   I_F         = decode(F_ref + alpha * (proj(F_ir^p) + proj(F_vis^p)))
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "ctrlfuse/backbone.hpp"
#include "ctrlfuse/psfm.hpp"
#include "ctrlfuse/rpe.hpp"
#include "ctrlfuse/segmentation.hpp"

namespace ctrlfuse {

enum class Ablation { none, no_prompt, no_seg, no_vis, no_ir, exchange_sq };

const char* to_string(Ablation a);
/// Throws ConfigError for unknown names.
Ablation parse_ablation(std::string_view name);

struct ModelConfig {
    BackboneConfig backbone;
    std::size_t n_queries = 40;
    std::size_t heads = 1;
    std::size_t embed_dim = 32;  // D_sam
    Ablation ablation = Ablation::none;

    static ModelConfig desk() { return {}; }
    static ModelConfig full();

    std::uint64_t seed() const { return backbone.seed; }
    void validate() const;
};

struct ForwardResult {
    FeatureMap f_ir, f_vis, f_ref;
    Tensor i_ref;
    Tensor embedding;        // undefined when the backend is unused
    Tensor p_ir, p_vis;      // N x D_sam, undefined for a removed branch
    Tensor m_ir, m_vis;      // 1 x H x W gating masks, undefined for a removed branch
    Tensor i_seg;            // 1 x H x W
    std::optional<FeatureMap> fp_ir, fp_vis;
    FeatureMap f_final;
    Tensor i_f;

    /// Branch masks that carry segmentation supervision.
    std::vector<Tensor> supervised_masks() const;
};

class CtrlFuseModel {
public:
    explicit CtrlFuseModel(const ModelConfig& cfg);

    CtrlFuseModel(const CtrlFuseModel&) = delete;
    CtrlFuseModel& operator=(const CtrlFuseModel&) = delete;

    /// vis is 3 x H x W. A missing prompt selects the prompt-free path: an
    /// empty mask with alpha forced to 0, so I_F == I_ref.
    ForwardResult forward(const ImagePair& pair, const std::optional<PromptMask>& prompt,
                          const IntensityControl& ctrl = {}) const;

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    const FusionBackbone& backbone() const { return backbone_; }
    const SegmentationBackend& backend() const { return backend_; }
    const FeatureComposer& composer() const { return composer_; }
    const ReferencePromptEncoder* rpe(Modality m) const;

    bool uses_branch(Modality m) const;
    bool uses_mask_decoder() const;

private:
    ModelConfig cfg_;
    nn::ParamStore store_;
    FusionBackbone backbone_;
    SegmentationBackend backend_;
    std::unique_ptr<ReferencePromptEncoder> rpe_ir_, rpe_vis_;
    std::unique_ptr<PromptSemanticFusion> psfm_ir_, psfm_vis_;
    FeatureComposer composer_;
};

}  // namespace ctrlfuse
