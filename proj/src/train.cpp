// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/train.hpp"

#include <cmath>
#include "json.hpp"
#include <numeric>
#include <sstream>

#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/rng.hpp"

namespace ctrlfuse {

Adam::Adam(std::vector<Tensor> params, const AdamConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        const auto g = p.node().grad;
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            w[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        }
    }
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        if (p.has_grad())
            for (const double g : p.node().grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double f = max_norm / norm;
        for (const auto& p : params)
            if (p.has_grad())
                for (double& g : p.node().grad) g *= f;
    }
    return norm;
}

TrainConfig TrainConfig::full() {
    TrainConfig c;
    c.epochs = 150;
    return c;
}

void TrainConfig::validate() const {
    if (!(adam.lr > 0.0) || !std::isfinite(adam.lr)) throw ConfigError("lr must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
}

std::string EpochLog::to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["steps"] = steps;
    j["pixel"] = mean.pixel;
    j["grad"] = mean.grad;
    j["int"] = mean.intensity;
    j["percep"] = mean.percep;
    j["bce"] = mean.bce;
    j["dice"] = mean.dice;
    j["fusion_total"] = mean.fusion_total;
    j["seg_total"] = mean.seg_total;
    j["total"] = mean.total;
    return j.dump();
}

LossTerms scene_loss(const CtrlFuseModel& model, const SynthScene& scene, SceneClass prompt_class,
                     const FrozenPerceptualNet& percep) {
    const bool prompted = model.config().ablation != Ablation::no_prompt;
    const PromptMask prompt = scene.mask(prompt_class);
    const ForwardResult r = model.forward(scene.pair, prompted ? std::optional<PromptMask>(prompt) : std::nullopt);
    LossInputs in;
    in.i_f = r.i_f;
    in.i_ir = scene.pair.ir;
    in.i_vis_y = luminance(scene.pair.vis);
    in.i_seg = r.i_seg;
    in.include_seg = model.uses_mask_decoder();
    if (in.include_seg) in.branch_masks = r.supervised_masks();
    in.target = prompt.tensor();
    return total_loss(in, percep);
}

TrainResult train(CtrlFuseModel& model, const std::vector<SynthScene>& dataset, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
    cfg.validate();
    if (dataset.empty()) throw ContractError("training needs a nonempty dataset");

    const FrozenPerceptualNet percep(model.config().seed());
    TrainResult result;
    result.frozen_checksum_before = model.params().checksum(true);
    result.perceptual_checksum_before = percep.checksum();

    const std::vector<Tensor> params = model.params().trainable();
    Adam adam(params, cfg.adam);
    Rng rng(derive_seed(cfg.seed, "train"));
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    double last_finite = 0.0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        LossBreakdown sum;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            const double inv = 1.0 / static_cast<double>(end - start);
            model.params().zero_grad();
            for (std::size_t b = start; b < end; ++b) {
                const SynthScene& scene = dataset[order[b]];
                const auto objects = scene.objects();
                const SceneClass cls = objects[rng.below(objects.size())];
                const LossTerms terms = scene_loss(model, scene, cls, percep);
                const double total = terms.total.item();
                if (!std::isfinite(total))
                    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                        std::to_string(adam.steps() + 1) + " (last finite loss " +
                                        std::to_string(last_finite) + ")");
                last_finite = total;
                sum += LossBreakdown::from(terms);
                ad::backward(ad::scale(terms.total, inv));
            }
            clip_grad_norm(params, cfg.clip_norm);
            adam.step();
        }
        EpochLog log{epoch, adam.steps(), sum.scaled(1.0 / static_cast<double>(dataset.size()))};
        if (on_epoch) on_epoch(log);
        result.epochs.push_back(log);
    }
    model.params().zero_grad();
    result.frozen_checksum_after = model.params().checksum(true);
    result.perceptual_checksum_after = percep.checksum();
    std::ostringstream state;
    state << rng.engine();
    result.rng_state = state.str();
    return result;
}

}  // namespace ctrlfuse
