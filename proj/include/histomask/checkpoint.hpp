// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints: a JSON manifest (`<file>.manifest`) listing tensor names,
// shapes, groups and frozen flags, plus a flat little-endian float32 blob in
// manifest order.
#pragma once

#include "histomask/model.hpp"

#include <filesystem>
#include <json.hpp>

namespace histomask {

struct TensorEntry {
  std::string name;
  ParamGroup group = ParamGroup::backbone;
  Eigen::Index rows = 0, cols = 0;
  bool frozen = true;
};

struct CheckpointInfo {
  ModelConfig config;
  std::string stage;
  std::string config_hash;
  std::vector<TensorEntry> tensors;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

std::filesystem::path manifest_path(const std::filesystem::path& bin);

/// With `all_frozen` every tensor is flagged frozen; otherwise the flag is the
/// negation of the tensor's trainable bit.
void save_checkpoint(const std::filesystem::path& bin, const Model<float>& model,
                     const std::string& stage, const std::string& config_hash,
                     bool all_frozen = false);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& bin);

/// Rebuilds the model recorded in the manifest; trainable = !frozen.
Model<float> load_checkpoint(const std::filesystem::path& bin, CheckpointInfo* info = nullptr);

/// Overwrites every tensor of `model` that the checkpoint provides. Shape
/// mismatches raise ConfigError. Returns the number of tensors copied.
std::size_t load_into(Model<float>& model, const std::filesystem::path& bin);

}  // namespace histomask
