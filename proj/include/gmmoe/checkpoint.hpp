// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "gmmoe/network.hpp"

namespace gmmoe {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

// Adam moments keyed by parameter path; `step` counts completed updates.
struct OptimizerState {
  std::int64_t step = 0;
  std::map<std::string, Tensor<float>> m;
  std::map<std::string, Tensor<float>> v;
};

struct Checkpoint {
  ModelConfig model_config;
  BlockParams<float> params;
  OptimizerState optimizer;
  std::int64_t iteration = 0;  // completed training iterations
  std::uint64_t master_seed = 0;
  std::uint64_t rng_state_digest = 0;
  std::string config_digest;
  nlohmann::ordered_json run_config;  // parsed run config, may be null
};

/// Binary container:
///   "GMMOECKP" | u32 version | u64 n | n bytes JSON metadata
///   | u64 record count | records | u64 FNV-1a of all preceding bytes
/// Record: u32 name length | name | u8 dtype (0 f32, 1 f64) | u32 rank
///   | rank x i64 dims | raw little-endian data.
/// Names are "param/<path>", "adam_m/<path>" and "adam_v/<path>".
/// A JSON sidecar `<path>.json` repeats the metadata. The binary is written
/// to a temporary file and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

// Throws CheckpointError on missing, truncated, corrupted or
// version-mismatched files; nothing partial is returned.
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::ordered_json checkpoint_metadata(const Checkpoint& ckpt);

Checkpoint make_checkpoint(const Model<float>& model, const OptimizerState& opt, std::int64_t iteration,
                           std::uint64_t master_seed);
Model<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace gmmoe
