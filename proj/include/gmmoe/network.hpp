// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>
#include <string>
#include <vector>

#include "gmmoe/blocks.hpp"

namespace gmmoe {

/// Architecture of the encoder-decoder. Level l runs at 1/2^l resolution
/// with base_channels * 2^l channels; blocks_per_level holds one count per
/// encoder level plus the bottleneck, and decoder level l mirrors encoder
/// level l. When `block` enables no expert, every block slot holds a plain
/// residual conv block instead (the ablation baseline).
struct ModelConfig {
  Index base_channels = 16;
  Index num_levels = 3;
  std::vector<Index> blocks_per_level{1, 1, 1, 2};
  bool enable_sfeb = true;
  GmMoeBlockConfig block;  // `channels` is ignored and set per level
  bool zero_init_output = true;

  bool operator==(const ModelConfig&) const = default;

  static ModelConfig tiny();   // C=8, two levels
  static ModelConfig small();  // C=16, three levels (the default)
  static ModelConfig full();   // C=48, blocks (2, 2, 4, 4)
};

// Throws ConfigError naming the offending field.
void validate(const ModelConfig& cfg);

Index level_channels(const ModelConfig& cfg, Index level);
bool uses_experts(const ModelConfig& cfg);
// Block config for level l with the channel count filled in.
GmMoeBlockConfig block_config(const ModelConfig& cfg, Index level);

template <typename Scalar>
struct Model {
  ModelConfig config;
  BlockParams<Scalar> params;
};

/// Deterministic construction: identical (cfg, seed) give bit-identical
/// parameters. The output head is zero when cfg.zero_init_output.
template <typename Scalar>
Model<Scalar> build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Enhanced image clamp(I + R, 0, 1) for a (B, 3, H, W) batch. Inputs whose
/// extent is not a multiple of 2^num_levels are reflect-padded at the
/// bottom/right and cropped back.
template <typename Scalar>
Var<Scalar> forward(const Model<Scalar>& model, const Var<Scalar>& image);

// Inference without recording a graph.
template <typename Scalar>
Tensor<Scalar> enhance(const Model<Scalar>& model, const Tensor<Scalar>& image);

template <typename Scalar>
Index count_parameters(const Model<Scalar>& model) {
  return model.params.count_scalars();
}

// Ablatable components ("sfeb", "gate", "expert1".."expert3") present in
// the parameter tree.
template <typename Scalar>
std::set<std::string> component_set(const BlockParams<Scalar>& params);

// Model with converted parameter values (used by double-precision checks).
template <typename To, typename From>
Model<To> cast_model(const Model<From>& model) {
  return Model<To>{model.config, model.params.template cast<To>()};
}

}  // namespace gmmoe
