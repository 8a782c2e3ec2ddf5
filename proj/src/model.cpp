// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/model.hpp"

#include "ctrlfuse/errors.hpp"

namespace ctrlfuse {

using namespace ad;

namespace {

BackendConfig backend_config(const ModelConfig& cfg) {
    return {cfg.backbone.enc_channels, cfg.embed_dim, cfg.heads};
}

RpeConfig rpe_config(const ModelConfig& cfg) {
    RpeConfig r;
    r.channels = cfg.backbone.enc_channels;
    r.ref_channels = 2 * cfg.backbone.enc_channels;
    r.n_queries = cfg.n_queries;
    r.heads = cfg.heads;
    r.exchange_sq = cfg.ablation == Ablation::exchange_sq;
    return r;
}

const ModelConfig& checked(const ModelConfig& cfg) {
    cfg.validate();
    return cfg;
}

}  // namespace

const char* to_string(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::no_prompt: return "no_prompt";
        case Ablation::no_seg: return "no_seg";
        case Ablation::no_vis: return "no_vis";
        case Ablation::no_ir: return "no_ir";
        case Ablation::exchange_sq: return "exchange_sq";
    }
    return "none";
}

Ablation parse_ablation(std::string_view name) {
    for (Ablation a : {Ablation::none, Ablation::no_prompt, Ablation::no_seg, Ablation::no_vis, Ablation::no_ir,
                       Ablation::exchange_sq})
        if (name == to_string(a)) return a;
    throw ConfigError("unknown ablation '" + std::string(name) +
                      "' (expected none, no_prompt, no_seg, no_vis, no_ir or exchange_sq)");
}

ModelConfig ModelConfig::full() {
    ModelConfig c;
    c.backbone = BackboneConfig::full();
    c.embed_dim = 256;
    return c;
}

void ModelConfig::validate() const {
    backbone.validate();
    if (n_queries == 0) throw ConfigError("n_queries must be positive");
    if (heads == 0 || backbone.enc_channels % heads != 0 || embed_dim % heads != 0)
        throw ConfigError("heads must divide the attention widths");
    if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be a multiple of 4");
    if (backbone.decoder_schedule.front() != 2 * backbone.enc_channels)
        throw ConfigError("decoder input width must equal F_ref width (2 x enc_channels)");
}

std::vector<Tensor> ForwardResult::supervised_masks() const {
    std::vector<Tensor> out;
    if (m_ir.defined()) out.push_back(m_ir);
    if (m_vis.defined()) out.push_back(m_vis);
    return out;
}

CtrlFuseModel::CtrlFuseModel(const ModelConfig& cfg)
    : cfg_(checked(cfg)),
      store_(cfg.seed()),
      backbone_(store_, cfg.backbone),
      backend_(store_, backend_config(cfg)),
      composer_(store_, "composer", cfg.backbone.enc_channels, 2 * cfg.backbone.enc_channels) {
    const RpeConfig rc = rpe_config(cfg);
    if (uses_branch(Modality::ir)) {
        rpe_ir_ = std::make_unique<ReferencePromptEncoder>(store_, "rpe_ir", rc, backend_);
        psfm_ir_ = std::make_unique<PromptSemanticFusion>(store_, "psfm_ir", rc.channels, cfg.embed_dim, cfg.heads);
    }
    if (uses_branch(Modality::vis)) {
        rpe_vis_ = std::make_unique<ReferencePromptEncoder>(store_, "rpe_vis", rc, backend_);
        psfm_vis_ = std::make_unique<PromptSemanticFusion>(store_, "psfm_vis", rc.channels, cfg.embed_dim, cfg.heads);
    }
}

bool CtrlFuseModel::uses_branch(Modality m) const {
    switch (cfg_.ablation) {
        case Ablation::no_prompt: return false;
        case Ablation::no_ir: return m == Modality::vis;
        case Ablation::no_vis: return m == Modality::ir;
        default: return true;
    }
}

bool CtrlFuseModel::uses_mask_decoder() const {
    return cfg_.ablation != Ablation::no_prompt && cfg_.ablation != Ablation::no_seg;
}

const ReferencePromptEncoder* CtrlFuseModel::rpe(Modality m) const {
    return m == Modality::ir ? rpe_ir_.get() : rpe_vis_.get();
}

ForwardResult CtrlFuseModel::forward(const ImagePair& pair, const std::optional<PromptMask>& prompt,
                                     const IntensityControl& ctrl) const {
    pair.validate();
    ctrl.validate();
    const std::size_t h = pair.height(), w = pair.width();
    if (prompt && (prompt->height() != h || prompt->width() != w))
        throw ShapeError("prompt mask size does not match the image pair");

    ForwardResult r;
    r.f_ir = backbone_.encode(Modality::ir, pair.ir);
    r.f_vis = backbone_.encode(Modality::vis, pair.vis);
    r.f_ref = reference_features(r.f_ir, r.f_vis);
    r.i_ref = backbone_.decode(r.f_ref);

    if (!uses_branch(Modality::ir) && !uses_branch(Modality::vis)) {
        r.i_seg = Tensor::zeros({1, h, w});
        r.f_final = r.f_ref;
        r.i_f = r.i_ref;
        return r;
    }

    const PromptMask mask = prompt ? *prompt : PromptMask::empty(h, w);
    const IntensityControl effective{prompt ? ctrl.alpha : 0.0};
    const bool targeted = mask.count() > 0;
    if (uses_mask_decoder()) r.embedding = backend_.encode(r.i_ref);

    auto branch = [&](Modality m, const FeatureMap& f_mod, Tensor& p, Tensor& gate, std::optional<FeatureMap>& fp) {
        const ReferencePromptEncoder& enc = m == Modality::ir ? *rpe_ir_ : *rpe_vis_;
        const PromptSemanticFusion& psfm = m == Modality::ir ? *psfm_ir_ : *psfm_vis_;
        p = enc.forward(mask, f_mod, r.f_ref);
        // Without the mask decoder the binary prompt itself gates the features.
        gate = uses_mask_decoder() ? backend_.decode(r.embedding, p) : mask.tensor();
        // An all-zero prompt names no target: the decoded mask is still
        // reported, but nothing is injected.
        fp = psfm.forward(f_mod, p, targeted ? gate : Tensor::zeros({1, h, w}));
    };
    if (uses_branch(Modality::ir)) branch(Modality::ir, r.f_ir, r.p_ir, r.m_ir, r.fp_ir);
    if (uses_branch(Modality::vis)) branch(Modality::vis, r.f_vis, r.p_vis, r.m_vis, r.fp_vis);

    if (r.m_ir.defined() && r.m_vis.defined())
        r.i_seg = combine_masks(r.m_ir, r.m_vis);
    else
        r.i_seg = r.m_ir.defined() ? r.m_ir : r.m_vis;

    r.f_final = composer_.compose(r.f_ref, r.fp_ir ? &*r.fp_ir : nullptr, r.fp_vis ? &*r.fp_vis : nullptr, effective);
    r.i_f = effective.alpha == 0.0 ? r.i_ref : backbone_.decode(r.f_final);
    return r;
}

}  // namespace ctrlfuse
