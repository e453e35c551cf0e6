// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gmmoe/checkpoint.hpp"
#include "gmmoe/data.hpp"
#include "gmmoe/metrics.hpp"
#include "gmmoe/network.hpp"

namespace gmmoe {

struct TrainConfig {
  double lr0 = 1e-3;
  // Empty: 50%, 75% and 90% of total_iters.
  std::vector<std::int64_t> milestones;
  double gamma = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::int64_t batch_size = 4;
  Index patch = 256;
  std::int64_t total_iters = 1000;
  std::uint64_t master_seed = 0;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::int64_t log_every = 1;
  std::optional<double> grad_clip;    // global L2 norm; off by default
  double loss_eps = kDefaultLossEps;

  bool operator==(const TrainConfig&) const = default;
};

// Throws ConfigError naming the offending field.
void validate(const TrainConfig& cfg);

// Explicit milestones, or the 50/75/90% defaults (deduplicated, > 0).
std::vector<std::int64_t> resolved_milestones(const TrainConfig& cfg);

// lr0 * gamma^k, k = number of milestones <= iter. Throws std::out_of_range
// unless 0 <= iter < total_iters.
double lr_at(const TrainConfig& cfg, std::int64_t iter);

// One Adam step over every parameter with a gradient; bias-corrected.
void adam_step(BlockParams<float>& params, OptimizerState& state, const TrainConfig& cfg, double lr);

// Rescales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(BlockParams<float>& params, double max_norm);

/// Batch drawn at iteration `iter`: slot b uses the stream
/// make_stream(master_seed, iter, b) to choose a pair (with replacement),
/// a window and a dihedral transform. Pure function of its arguments.
struct Batch {
  ImagePair images;
  std::vector<std::size_t> pair_indices;
};
Batch sample_batch(const PairCache& data, const TrainConfig& cfg, PatchMode mode, const AugmentSpec& aug,
                   std::int64_t iter);

struct IterationRecord {
  std::int64_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct TrainOptions {
  PatchMode patch_mode = PatchMode::crop;
  AugmentSpec augment;
  // When set, log.jsonl and ckpt_<iter>.bin are written here.
  std::optional<std::filesystem::path> out_dir;
  std::string config_digest;
  nlohmann::ordered_json run_config;
  // Stop once this many iterations have completed (< total_iters).
  std::optional<std::int64_t> stop_at;
  std::function<void(const IterationRecord&)> on_iteration;
};

struct TrainResult {
  std::vector<IterationRecord> records;  // every iteration run by this call
  std::int64_t iteration = 0;            // completed iterations
  OptimizerState optimizer;
  std::optional<std::filesystem::path> last_checkpoint;
};

/// Minimizes psnr_loss with Adam under the lr_at schedule, starting from
/// `start` (a resumed optimizer state and iteration count) when given.
/// Deterministic for a fixed master_seed. Throws NumericError on a
/// non-finite loss, naming the iteration and the pair ids of the batch.
TrainResult train(Model<float>& model, const PairCache& data, const TrainConfig& cfg, const TrainOptions& opts,
                  const OptimizerState* start_state = nullptr, std::int64_t start_iter = 0);

// Full-resolution enhancement of every pair; per-image and mean PSNR/SSIM.
MetricReport evaluate(const Model<float>& model, const PairCache& data, const std::string& config_digest = {});

/// One row of the ablation table: which components are switched on and the
/// published LOL-v2 reference scores for that row.
struct AblationPreset {
  int id = 8;
  bool baseline = true;
  bool sfeb = true;
  bool expert1 = true;
  bool expert2 = true;
  bool expert3 = true;
  bool gate = true;
  double ref_real_psnr = 0.0;
  double ref_real_ssim = 0.0;
  double ref_syn_psnr = 0.0;
  double ref_syn_ssim = 0.0;

  std::string label() const;  // e.g. "Baseline+SFEB+Net1+WA"
};

// Throws ConfigError unless 1 <= id <= 8.
AblationPreset ablation_preset(int id);
const std::vector<AblationPreset>& ablation_presets();

// base_cfg with the preset's toggles applied.
ModelConfig ablation_config(const AblationPreset& preset, const ModelConfig& base_cfg);
Model<float> ablation_model(const AblationPreset& preset, const ModelConfig& base_cfg, std::uint64_t seed);

// Components a preset should produce in the parameter tree.
std::set<std::string> expected_components(const AblationPreset& preset);

}  // namespace gmmoe
