// SPDX-License-Identifier: Apache-2.0
//
// Registry of finite-difference checks covering every autodiff primitive,
// the model's composite paths and each loss term. A case maps a seed to the
// worst relative error over the coordinates it probes.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace ctrlfuse {

struct GradCase {
    std::string name;
    std::string group;  // "op", "composite" or "loss"
    double tolerance = 1e-4;
    std::function<double(std::uint64_t seed)> run;
};

const std::vector<GradCase>& grad_cases();

struct GradCaseResult {
    std::string name;
    std::string group;
    double worst = 0.0;  // over all seeds
    double tolerance = 0.0;
    std::size_t seeds = 0;
    bool passed = false;
};

/// Runs every case over seeds base_seed .. base_seed + seeds - 1.
std::vector<GradCaseResult> run_grad_suite(std::size_t seeds = 10, std::uint64_t base_seed = 1);

}  // namespace ctrlfuse
