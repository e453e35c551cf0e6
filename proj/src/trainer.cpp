// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

namespace gmmoe {
namespace fs = std::filesystem;

void validate(const TrainConfig& cfg) {
  if (!(cfg.lr0 > 0.0) || !std::isfinite(cfg.lr0)) throw ConfigError("train.lr0 must be positive");
  if (!(cfg.gamma > 0.0 && cfg.gamma <= 1.0)) throw ConfigError("train.gamma must lie in (0, 1]");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0)) throw ConfigError("train.beta1 must lie in [0, 1)");
  if (!(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) throw ConfigError("train.beta2 must lie in [0, 1)");
  if (!(cfg.adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (cfg.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (cfg.patch < 1) throw ConfigError("train.patch must be >= 1");
  if (cfg.total_iters < 1) throw ConfigError("train.total_iters must be >= 1");
  if (cfg.checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (cfg.log_every < 1) throw ConfigError("train.log_every must be >= 1");
  if (cfg.grad_clip && !(*cfg.grad_clip > 0.0)) throw ConfigError("train.grad_clip must be positive");
  if (!(cfg.loss_eps > 0.0)) throw ConfigError("train.loss_eps must be positive");
  for (std::size_t i = 0; i < cfg.milestones.size(); ++i) {
    const auto m = cfg.milestones[i];
    if (m <= 0 || m >= cfg.total_iters) throw ConfigError("train.milestones must lie in (0, total_iters)");
    if (i > 0 && m <= cfg.milestones[i - 1]) throw ConfigError("train.milestones must be strictly increasing");
  }
}

std::vector<std::int64_t> resolved_milestones(const TrainConfig& cfg) {
  if (!cfg.milestones.empty()) return cfg.milestones;
  std::vector<std::int64_t> out;
  for (double f : {0.5, 0.75, 0.9}) {
    const auto m = static_cast<std::int64_t>(std::floor(f * static_cast<double>(cfg.total_iters)));
    if (m > 0 && m < cfg.total_iters && (out.empty() || m > out.back())) out.push_back(m);
  }
  return out;
}

double lr_at(const TrainConfig& cfg, std::int64_t iter) {
  if (iter < 0 || iter >= cfg.total_iters) {
    throw std::out_of_range("lr_at: iteration " + std::to_string(iter) + " outside [0, " +
                            std::to_string(cfg.total_iters) + ")");
  }
  double lr = cfg.lr0;
  for (auto m : resolved_milestones(cfg)) {
    if (m <= iter) lr *= cfg.gamma;
  }
  return lr;
}

void adam_step(BlockParams<float>& params, OptimizerState& state, const TrainConfig& cfg, double lr) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  const float c1 = static_cast<float>(1.0 - std::pow(cfg.beta1, t));
  const float c2 = static_cast<float>(1.0 - std::pow(cfg.beta2, t));
  const float step = static_cast<float>(lr);
  const float eps = static_cast<float>(cfg.adam_eps);
  for (auto& [path, var] : params) {
    if (!var.has_grad()) continue;
    const auto g = var.grad().array();
    auto [mit, m_new] = state.m.try_emplace(path, Tensor<float>(var.shape()));
    auto [vit, v_new] = state.v.try_emplace(path, Tensor<float>(var.shape()));
    auto m = mit->second.array();
    auto v = vit->second.array();
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.square();
    var.mutable_value().array() -= step * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

double clip_grad_norm(BlockParams<float>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [path, var] : params) {
    if (var.has_grad()) sq += var.grad().vec().template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-12));
    for (auto& [path, var] : params) {
      if (var.has_grad()) var.grad_buffer().array() *= s;
    }
  }
  return norm;
}

Batch sample_batch(const PairCache& data, const TrainConfig& cfg, PatchMode mode, const AugmentSpec& aug,
                   std::int64_t iter) {
  if (data.size() == 0) throw PairingError("training manifest is empty");
  const Index b = cfg.batch_size;
  Batch batch;
  batch.images.low = ImageBatch(Shape{b, 3, cfg.patch, cfg.patch});
  batch.images.gt = ImageBatch(Shape{b, 3, cfg.patch, cfg.patch});
  const Index per = 3 * cfg.patch * cfg.patch;
  for (Index s = 0; s < b; ++s) {
    Rng rng = make_stream(cfg.master_seed, static_cast<std::uint64_t>(iter), static_cast<std::uint64_t>(s));
    const auto index = static_cast<std::size_t>(uniform_index(rng, data.size()));
    const ImagePair p = sample_training_patch(data.get(index), cfg.patch, mode, aug, rng);
    std::copy_n(p.low.data(), per, batch.images.low.sample(s));
    std::copy_n(p.gt.data(), per, batch.images.gt.sample(s));
    batch.pair_indices.push_back(index);
  }
  return batch;
}

TrainResult train(Model<float>& model, const PairCache& data, const TrainConfig& cfg, const TrainOptions& opts,
                  const OptimizerState* start_state, std::int64_t start_iter) {
  validate(cfg);
  opts.augment.validate();
  if (data.size() == 0) throw PairingError("training manifest is empty");
  if (start_iter < 0 || start_iter > cfg.total_iters) throw ConfigError("resume iteration outside the schedule");
  const std::int64_t end = opts.stop_at ? std::min(*opts.stop_at, cfg.total_iters) : cfg.total_iters;

  TrainResult result;
  if (start_state) result.optimizer = *start_state;
  result.iteration = start_iter;

  std::ofstream log;
  if (opts.out_dir) {
    fs::create_directories(*opts.out_dir);
    log.open(*opts.out_dir / "log.jsonl", std::ios::app);
    if (!log) throw DataError("cannot open log " + (*opts.out_dir / "log.jsonl").string());
  }

  auto write_checkpoint = [&](std::int64_t iter) {
    Checkpoint c = make_checkpoint(model, result.optimizer, iter, cfg.master_seed);
    c.config_digest = opts.config_digest;
    c.run_config = opts.run_config;
    const fs::path path = *opts.out_dir / ("ckpt_" + std::to_string(iter) + ".bin");
    save_checkpoint(c, path);
    result.last_checkpoint = path;
  };

  for (std::int64_t it = start_iter; it < end; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(cfg, it);
    const Batch batch = sample_batch(data, cfg, opts.patch_mode, opts.augment, it);

    model.params.zero_grad();
    const Var<float> pred = forward(model, Var<float>(batch.images.low));
    const Var<float> loss = psnr_loss(pred, batch.images.gt, cfg.loss_eps);
    const double loss_value = loss.value()[0];
    if (!std::isfinite(loss_value)) {
      std::string ids;
      for (auto i : batch.pair_indices) ids += (ids.empty() ? "" : ", ") + data.manifest().pairs[i].id;
      throw NumericError("non-finite loss at iteration " + std::to_string(it) + " (batch pairs: " + ids + ")");
    }
    backward(loss);
    if (cfg.grad_clip) clip_grad_norm(model.params, *cfg.grad_clip);
    adam_step(model.params, result.optimizer, cfg, lr);
    result.iteration = it + 1;

    IterationRecord rec;
    rec.iter = it;
    rec.lr = lr;
    rec.loss = loss_value;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.records.push_back(rec);
    if (log.is_open() && (it % cfg.log_every == 0 || it + 1 == end)) {
      nlohmann::ordered_json j{{"iter", rec.iter}, {"lr", rec.lr}, {"loss", rec.loss}, {"wall_ms", rec.wall_ms}};
      log << j.dump() << "\n" << std::flush;
    }
    if (opts.on_iteration) opts.on_iteration(rec);
    if (opts.out_dir && cfg.checkpoint_every > 0 && result.iteration % cfg.checkpoint_every == 0 &&
        result.iteration != end) {
      write_checkpoint(result.iteration);
    }
  }
  if (opts.out_dir && end > start_iter) write_checkpoint(result.iteration);
  return result;
}

MetricReport evaluate(const Model<float>& model, const PairCache& data, const std::string& config_digest) {
  MetricReport report;
  report.config_digest = config_digest;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string& id = data.manifest().pairs[i].id;
    try {
      const ImagePair pair = data.get(i);
      const ImageBatch out = enhance(model, pair.low);
      report.add({id, psnr_metric(out, pair.gt)[0], ssim_metric(out, pair.gt)[0]});
    } catch (const InputTooSmallError& e) {
      throw InputTooSmallError("pair '" + id + "': " + e.what());
    } catch (const ShapeError& e) {
      throw ShapeError("pair '" + id + "': " + e.what());
    } catch (const DecodeError& e) {
      throw DecodeError("pair '" + id + "': " + e.what());
    } catch (const IntegrityError& e) {
      throw IntegrityError("pair '" + id + "': " + e.what());
    }
  }
  return report;
}

std::string AblationPreset::label() const {
  std::string s = "Baseline";
  if (sfeb) s += "+SFEB";
  if (expert1) s += "+Net1";
  if (expert2) s += "+Net2";
  if (expert3) s += "+Net3";
  if (gate) s += "+WA";
  return s;
}

const std::vector<AblationPreset>& ablation_presets() {
  //                                 id  base   sfeb   net1   net2   net3   wa     real          syn
  static const std::vector<AblationPreset> kPresets = {
      {1, true, false, false, false, false, false, 19.45, 0.7079, 20.35, 0.7431},
      {2, true, true, false, false, false, false, 20.27, 0.7236, 23.44, 0.7646},
      {3, true, true, true, false, false, false, 21.35, 0.7446, 24.35, 0.8436},
      {4, true, true, true, true, false, false, 22.11, 0.8021, 25.14, 0.9327},
      {5, true, true, true, true, false, true, 23.23, 0.8045, 26.08, 0.9351},
      {6, true, true, true, false, true, true, 23.31, 0.8054, 26.12, 0.9362},
      {7, true, true, false, true, true, true, 23.35, 0.8055, 26.15, 0.9366},
      {8, true, true, true, true, true, true, 23.65, 0.8060, 26.29, 0.9371},
  };
  return kPresets;
}

AblationPreset ablation_preset(int id) {
  if (id < 1 || id > 8) throw ConfigError("ablation preset must be in 1..8, got " + std::to_string(id));
  return ablation_presets()[static_cast<std::size_t>(id - 1)];
}

ModelConfig ablation_config(const AblationPreset& preset, const ModelConfig& base_cfg) {
  ModelConfig cfg = base_cfg;
  cfg.enable_sfeb = preset.sfeb;
  cfg.block.enable_expert1 = preset.expert1;
  cfg.block.enable_expert2 = preset.expert2;
  cfg.block.enable_expert3 = preset.expert3;
  cfg.block.enable_gate = preset.gate;
  validate(cfg);
  return cfg;
}

Model<float> ablation_model(const AblationPreset& preset, const ModelConfig& base_cfg, std::uint64_t seed) {
  return build_model<float>(ablation_config(preset, base_cfg), seed);
}

std::set<std::string> expected_components(const AblationPreset& preset) {
  std::set<std::string> out;
  if (preset.sfeb) out.insert("sfeb");
  if (preset.expert1) out.insert("expert1");
  if (preset.expert2) out.insert("expert2");
  if (preset.expert3) out.insert("expert3");
  if (preset.gate) out.insert("gate");
  return out;
}

}  // namespace gmmoe
