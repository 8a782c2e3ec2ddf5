// SPDX-License-Identifier: Apache-2.0
//
// Procedural infrared/visible scenes with exact per-class masks: a hot,
// low-texture "person" blob and a striped, mid-temperature "car" box over a
// smooth background.
#pragma once

#include <cstdint>
#include <vector>

#include "ctrlfuse/backbone.hpp"
#include "ctrlfuse/rpe.hpp"

namespace ctrlfuse {

enum class SceneClass : std::uint8_t { background = 0, person = 1, car = 2 };

inline constexpr std::size_t kNumSceneClasses = 3;

const char* to_string(SceneClass c);

struct SynthScene {
    ImagePair pair;  // labels always set
    std::uint64_t seed = 0;

    std::size_t size() const { return pair.height(); }
    bool has(SceneClass c) const;
    /// Object classes present in the scene, in enum order.
    std::vector<SceneClass> objects() const;
    PromptMask mask(SceneClass c) const;
};

/// Scene i depends only on (seed, i); size must be >= 16.
SynthScene synth_scene(std::size_t size, std::uint64_t seed, std::size_t index);
std::vector<SynthScene> synth_generate(std::size_t n, std::size_t size, std::uint64_t seed);

}  // namespace ctrlfuse
