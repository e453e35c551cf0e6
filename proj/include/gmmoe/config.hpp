// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "gmmoe/data.hpp"
#include "gmmoe/network.hpp"
#include "gmmoe/trainer.hpp"

namespace gmmoe {

struct DataConfig {
  Layout layout = Layout::generic_paired;
  PatchMode patch_mode = PatchMode::crop;
  AugmentSpec augment;
};

struct AblationConfig {
  std::optional<int> preset;
};

/// Parsed run file. Sections:
///
///   [model]     preset ("tiny" | "small" | "full", applied first), base_channels,
///               num_levels, blocks_per_level, enable_sfeb, zero_init_output
///   [model.block] enable_expert1..3, enable_gate, sfeb_dilations, sfeb_kernel,
///               attention_kernel
///   [train]     lr0, milestones, gamma, beta1, beta2, adam_eps, batch_size, patch,
///               total_iters, master_seed, checkpoint_every, log_every, grad_clip,
///               loss_eps
///   [data]      layout, patch_mode, rotations, hflip, vflip
///   [ablation]  preset (1..8)
///
/// Unknown sections or keys and ill-typed values are ConfigErrors naming the
/// field, e.g. "train.batch_size: expected an integer".
struct RunConfig {
  ModelConfig model = ModelConfig::small();
  TrainConfig train;
  DataConfig data;
  AblationConfig ablation;
};

RunConfig parse_run_config_toml(const std::string& text);
RunConfig parse_run_config_json(const nlohmann::json& j);
// ".json" files are read as JSON, everything else as TOML.
RunConfig load_run_config(const std::filesystem::path& path);

// Throws ConfigError.
void validate(const RunConfig& cfg);

// Fully expanded, key-ordered form; parse_run_config_json inverts it.
nlohmann::ordered_json to_json(const RunConfig& cfg);
// FNV-1a of the canonical JSON, as 16 hex digits.
std::string config_digest(const RunConfig& cfg);

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg);
// Accepts the output of model_config_to_json (and a "preset" key).
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace gmmoe
