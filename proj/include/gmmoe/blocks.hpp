// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <optional>
#include <vector>

#include "gmmoe/ops.hpp"
#include "gmmoe/params.hpp"

namespace gmmoe {

/// Toggles and widths of one gated mixture-of-experts block.
struct GmMoeBlockConfig {
  Index channels = 16;
  bool enable_expert1 = true;  // color restoration
  bool enable_expert2 = true;  // detail enhancement
  bool enable_expert3 = true;  // advanced feature enhancement
  bool enable_gate = true;     // false: uniform weights over enabled experts
  std::vector<Index> sfeb_dilations{1, 2, 3};
  Index sfeb_kernel = 3;
  Index attention_kernel = 7;

  std::array<bool, 3> experts() const { return {enable_expert1, enable_expert2, enable_expert3}; }
  Index enabled_count() const {
    return Index(enable_expert1) + Index(enable_expert2) + Index(enable_expert3);
  }
  bool operator==(const GmMoeBlockConfig&) const = default;
};

// Throws ConfigError naming the offending field.
void validate(const GmMoeBlockConfig& cfg);

// Hidden widths of the gate and of the expert-2 channel-attention transform.
Index gate_hidden_width(Index channels);
Index attention_hidden_width(Index channels);

// ---------------------------------------------------------------------------
// Parameter registration. Each adds a subtree named after the component
// ("gate", "expert1", ...) below the builder's prefix.

template <typename Scalar>
void add_gate_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg);
template <typename Scalar>
void add_expert_color_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg);
template <typename Scalar>
void add_expert_detail_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg);
template <typename Scalar>
void add_expert_feature_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg);
template <typename Scalar>
void add_sfeb_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg);
// Gate (when enabled) plus every enabled expert.
template <typename Scalar>
void add_gm_moe_block_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg);
// Residual conv-ReLU-conv block used where no expert is enabled.
template <typename Scalar>
void add_plain_block_params(ParamBuilder<Scalar> b, Index channels);

// ---------------------------------------------------------------------------
// Forward functions. `p` is scoped at the block (the parent of "gate",
// "expert1", ...). A channel count that differs from cfg.channels is a
// ConfigError.

// Pre-softmax gate scores, (B, 3, 1, 1): GAP -> 1x1 -> ReLU -> 1x1.
template <typename Scalar>
Var<Scalar> gate_logits(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg);

// Softmax of gate logits with disabled experts masked out (weight exactly 0).
template <typename Scalar>
Var<Scalar> gate_softmax(const Var<Scalar>& logits, const GmMoeBlockConfig& cfg);

/// Per-sample expert weights (B, 3, 1, 1) on the probability simplex.
/// With the gate disabled: a constant uniform split over enabled experts.
template <typename Scalar>
Var<Scalar> gate_weights(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg);

/// Color-restoration expert. Strided 3x3 conv to half resolution with 2C
/// channels, a 3x3 feature conv, 3x3 stride-1 max-pool, bilinear 2x
/// upsampling back to (H, W), 1x1 projection to C, residual add of x and a
/// sigmoid. Output lies in (0, 1). Needs H, W >= 2.
template <typename Scalar>
Var<Scalar> expert_color(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg);

/// Detail expert: 3x3 conv + ReLU feeding a channel-attention branch
/// (shared transform of avg- and max-pooled descriptors) and a spatial
/// attention branch (k x k conv over channel max/mean maps). Both branches
/// are concatenated, projected back to C and added to x.
template <typename Scalar>
Var<Scalar> expert_detail(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg);

// Per-channel scale (B, C, 1, 1) of expert_detail, in (0, 1).
template <typename Scalar>
Var<Scalar> detail_channel_attention(const Var<Scalar>& f, const ParamScope<Scalar>& p);
// Per-pixel scale (B, 1, H, W) of expert_detail, in (0, 1).
template <typename Scalar>
Var<Scalar> detail_spatial_attention(const Var<Scalar>& f, const ParamScope<Scalar>& p,
                                     const GmMoeBlockConfig& cfg);

// Splits 2C channels into halves a, b and returns a * b (C channels).
template <typename Scalar>
Var<Scalar> simple_gate(const Var<Scalar>& x);

// x * conv1x1(GAP(x)); `p` scoped at the projection (".weight"/".bias").
template <typename Scalar>
Var<Scalar> simplified_channel_attention(const Var<Scalar>& x, const ParamScope<Scalar>& p);

/// Feature expert: parallel 1x1/3x3/5x5 convs, concat + 1x1 to 2C,
/// simple_gate, simplified channel attention, 1x1 to C, residual add of x.
template <typename Scalar>
Var<Scalar> expert_feature(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg);

// Intermediates of sfeb, exposed for inspection.
template <typename Scalar>
struct SfebTrace {
  Var<Scalar> f1;        // compressed depthwise-separable branch
  Var<Scalar> f2;        // compressed dilated branch
  Var<Scalar> a1, a2;    // (B, 1, H, W) branch attention maps
  Var<Scalar> fused;     // f1 * a1 + f2 * a2
  Var<Scalar> mask;      // (B, C, H, W) final attention
  Var<Scalar> out;       // x * mask
};

/// Shallow feature enhancement: depthwise-separable branch and dilated
/// branch, each compressed by 1x1; channel mean/max of their sum feed a
/// k x k conv giving two sigmoid maps that weight the branches; a 1x1 conv
/// + sigmoid of the weighted sum masks the input.
template <typename Scalar>
Var<Scalar> sfeb(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg);
template <typename Scalar>
SfebTrace<Scalar> sfeb_trace(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg);

// Weighted sum of branch features, f1 * a1 + f2 * a2.
template <typename Scalar>
Var<Scalar> sfeb_fuse(const Var<Scalar>& f1, const Var<Scalar>& a1, const Var<Scalar>& f2,
                      const Var<Scalar>& a2);

/// Convex combination of expert outputs. `outputs` holds three entries in
/// expert order; entries of disabled experts are ignored (may be undefined).
/// `weights` is (B, 3, 1, 1) with zeros on disabled experts.
template <typename Scalar>
Var<Scalar> fuse_experts(std::span<const Var<Scalar>> outputs, const Var<Scalar>& weights,
                         const GmMoeBlockConfig& cfg);

/// Runs every enabled expert, weights them by the gate (or uniformly) and
/// returns their convex combination. `forced_weights`, when given, replaces
/// the gate output.
template <typename Scalar>
Var<Scalar> gm_moe_block(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg,
                         const Tensor<Scalar>* forced_weights = nullptr);

template <typename Scalar>
Var<Scalar> plain_block(const Var<Scalar>& x, const ParamScope<Scalar>& p);

}  // namespace gmmoe
