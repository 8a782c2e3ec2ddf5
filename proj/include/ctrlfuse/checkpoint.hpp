// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary checkpoint, little-endian throughout:
//
//   "CFCK" | version u32 | count u32
//   count x ( name_len u16 | name utf-8 | ndim u8 | dims u32[ndim] | f32[prod dims] )
//   meta_len u32 | meta JSON (model config echo, training rng state)
//
// Only trainable tensors are stored; frozen weights are regenerated from the
// seed in the config echo.
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include "json.hpp"
#include <string>
#include <vector>

#include "ctrlfuse/model.hpp"

namespace ctrlfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::vector<CheckpointTensor> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const CheckpointTensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
/// FormatError on bad magic or truncation, VersionError on an unknown version.
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Snapshot of the trainable weights plus the config echo; `extra` is merged
/// into the meta object.
Checkpoint make_checkpoint(const CtrlFuseModel& model, const nlohmann::json& extra = nlohmann::json::object());

/// Builds a model from the config echo and copies every stored tensor in.
/// Nothing is constructed unless every tensor matches by name and shape.
std::unique_ptr<CtrlFuseModel> restore_model(const Checkpoint& ckpt);

}  // namespace ctrlfuse
