// SPDX-License-Identifier: Apache-2.0
//
// Joint fusion + segmentation optimisation with Adam.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "ctrlfuse/losses.hpp"
#include "ctrlfuse/model.hpp"
#include "ctrlfuse/synth.hpp"

namespace ctrlfuse {

struct AdamConfig {
    double lr = 1.0e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
public:
    Adam(std::vector<Tensor> params, const AdamConfig& cfg);

    /// Applies one update from the parameters' current gradients.
    void step();
    std::size_t steps() const { return t_; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

/// Scales every gradient so their joint L2 norm is at most max_norm; returns
/// the norm before scaling.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

struct TrainConfig {
    AdamConfig adam;
    std::size_t epochs = 30;
    std::size_t batch = 4;
    double clip_norm = 5.0;
    std::uint64_t seed = 20240601;  // shuffling and prompt sampling

    static TrainConfig full();
    void validate() const;
};

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    std::size_t steps = 0;  // optimizer steps so far
    LossBreakdown mean;     // mean over the epoch's scenes

    std::string to_json() const;
};

struct TrainResult {
    std::vector<EpochLog> epochs;
    std::uint64_t frozen_checksum_before = 0;
    std::uint64_t frozen_checksum_after = 0;
    std::uint64_t perceptual_checksum_before = 0;
    std::uint64_t perceptual_checksum_after = 0;
    std::string rng_state;  // shuffling/prompt generator after the last epoch
};

/// Losses for one scene under the model's ablation, with the prompt drawn as
/// the mask of `prompt_class`.
LossTerms scene_loss(const CtrlFuseModel& model, const SynthScene& scene, SceneClass prompt_class,
                     const FrozenPerceptualNet& percep);

/// Trains `model` in place. `on_epoch` (optional) sees every record as soon
/// as the epoch ends. Throws TrainingError on a non-finite loss.
TrainResult train(CtrlFuseModel& model, const std::vector<SynthScene>& dataset, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace ctrlfuse
