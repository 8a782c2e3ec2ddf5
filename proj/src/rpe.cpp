// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/rpe.hpp"

#include "ctrlfuse/errors.hpp"

namespace ctrlfuse {

using namespace ad;

PromptMask PromptMask::from_values(std::size_t h, std::size_t w, std::span<const double> values) {
    if (values.size() != h * w)
        throw ShapeError("prompt mask size does not match " + std::to_string(h) + "x" + std::to_string(w));
    std::vector<double> bin(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) bin[i] = values[i] >= 0.5 ? 1.0 : 0.0;
    return PromptMask(Tensor::from({1, h, w}, std::move(bin)));
}

PromptMask PromptMask::empty(std::size_t h, std::size_t w) { return PromptMask(Tensor::zeros({1, h, w})); }
PromptMask PromptMask::full(std::size_t h, std::size_t w) { return PromptMask(Tensor::full({1, h, w}, 1.0)); }

std::size_t PromptMask::count() const {
    std::size_t n = 0;
    for (const double v : mask_.data()) n += v != 0.0;
    return n;
}

ReferencePromptEncoder::ReferencePromptEncoder(nn::ParamStore& store, const std::string& name, const RpeConfig& cfg,
                                               const SegmentationBackend& backend)
    : cfg_(cfg), backend_(&backend) {
    if (backend.config().prompt_channels != cfg.channels)
        throw ConfigError("prompt projection width does not match RPE channels");
    const std::size_t c = cfg.channels;
    const std::size_t support_in = (cfg.exchange_sq ? cfg.ref_channels : c) + c;
    const std::size_t query_in = (cfg.exchange_sq ? c : cfg.ref_channels) + c;
    queries_ = store.add(name + ".queries", {cfg.n_queries, c}, nn::Init::unit_normal);
    support_conv_ = nn::make_conv(store, name + ".support_conv", support_in, c, 3);
    query_conv_ = nn::make_conv(store, name + ".query_conv", query_in, c, 3);
    cross1_ = nn::make_attention(store, name + ".cross1", c, c, c, cfg.heads);
    self1_ = nn::make_attention(store, name + ".self1", c, c, c, cfg.heads);
    cross2_ = nn::make_attention(store, name + ".cross2", c, c, c, cfg.heads);
    self2_ = nn::make_attention(store, name + ".self2", c, c, c, cfg.heads);
}

Tensor ReferencePromptEncoder::target_pool(const PromptMask& prompt, const FeatureMap& support) {
    if (prompt.height() != support.height() || prompt.width() != support.width())
        throw ShapeError("prompt mask and support features differ in size");
    return global_avg_pool(mul(broadcast_channels(prompt.tensor(), support.channels()), support.values));
}

std::pair<FeatureMap, FeatureMap> ReferencePromptEncoder::build_support_query(const FeatureMap& f_modality,
                                                                              const FeatureMap& f_ref,
                                                                              const Tensor& f_t) const {
    if (f_modality.height() != f_ref.height() || f_modality.width() != f_ref.width())
        throw ShapeError("support and query features differ in size");
    const FeatureMap& support = cfg_.exchange_sq ? f_ref : f_modality;
    const FeatureMap& query = cfg_.exchange_sq ? f_modality : f_ref;
    const Tensor t = broadcast_spatial(f_t, f_ref.height(), f_ref.width());
    FeatureMap supp{leaky_relu(support_conv_(concat_channels({support.values, t})))};
    FeatureMap qry{leaky_relu(query_conv_(concat_channels({query.values, t})))};
    return {supp, qry};
}

Tensor ReferencePromptEncoder::encode_tokens(const FeatureMap& f_supp, const FeatureMap& f_qry) const {
    if (f_supp.channels() != cfg_.channels || f_qry.channels() != cfg_.channels)
        throw ShapeError("support/query width does not match the attention width");
    Tensor q = cross1_(queries_, flatten_spatial(f_supp.values));
    q = self1_(q, q);
    Tensor p = cross2_(q, flatten_spatial(f_qry.values));
    return self2_(p, p);
}

Tensor ReferencePromptEncoder::encode_prompt(const FeatureMap& f_supp, const FeatureMap& f_qry) const {
    return backend_->project_prompt(encode_tokens(f_supp, f_qry));
}

Tensor ReferencePromptEncoder::forward(const PromptMask& prompt, const FeatureMap& f_modality,
                                       const FeatureMap& f_ref) const {
    const Tensor f_t = target_pool(prompt, f_modality);
    const auto [supp, qry] = build_support_query(f_modality, f_ref, f_t);
    return encode_prompt(supp, qry);
}

}  // namespace ctrlfuse
