// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/network.hpp"

namespace gmmoe {
namespace {

std::string block_path(const std::string& stage, Index b) { return stage + ".block" + std::to_string(b); }

template <typename Scalar>
Var<Scalar> conv_named(const Var<Scalar>& x, const BlockParams<Scalar>& params, const std::string& name,
                       Index padding = 0) {
  return conv2d(x, params.at(name + ".weight"), params.at(name + ".bias"), Conv2dOptions{1, padding, 1, 1});
}

template <typename Scalar>
Var<Scalar> run_block(const Var<Scalar>& x, const Model<Scalar>& model, const std::string& path, Index level) {
  const auto scope = model.params.scope(path);
  if (!uses_experts(model.config)) return plain_block(x, scope);
  return gm_moe_block(x, scope, block_config(model.config, level));
}

template <typename Scalar>
void add_block(ParamBuilder<Scalar>& root, const ModelConfig& cfg, const std::string& path, Index level) {
  auto b = root.sub(path);
  if (uses_experts(cfg)) {
    add_gm_moe_block_params(b, block_config(cfg, level));
  } else {
    add_plain_block_params(b, level_channels(cfg, level));
  }
}

}  // namespace

ModelConfig ModelConfig::tiny() {
  ModelConfig cfg;
  cfg.base_channels = 8;
  cfg.num_levels = 2;
  cfg.blocks_per_level = {1, 1, 1};
  return cfg;
}

ModelConfig ModelConfig::small() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
  ModelConfig cfg;
  cfg.base_channels = 48;
  cfg.num_levels = 3;
  cfg.blocks_per_level = {2, 2, 4, 4};
  return cfg;
}

void validate(const ModelConfig& cfg) {
  if (cfg.base_channels < 1) throw ConfigError("model.base_channels must be positive");
  if (cfg.num_levels < 1) throw ConfigError("model.num_levels must be at least 1");
  if (cfg.num_levels > 6) throw ConfigError("model.num_levels must be at most 6");
  if (static_cast<Index>(cfg.blocks_per_level.size()) != cfg.num_levels + 1) {
    throw ConfigError("model.blocks_per_level must have num_levels + 1 = " +
                      std::to_string(cfg.num_levels + 1) + " entries");
  }
  for (Index b : cfg.blocks_per_level) {
    if (b < 1) throw ConfigError("model.blocks_per_level entries must be positive");
  }
  if (uses_experts(cfg)) {
    GmMoeBlockConfig b = cfg.block;
    b.channels = cfg.base_channels;
    validate(b);
  } else {
    if (cfg.block.enable_gate) throw ConfigError("model.block.enable_gate requires an enabled expert");
  }
  if (cfg.enable_sfeb) {
    GmMoeBlockConfig b = cfg.block;
    if (b.sfeb_dilations.empty()) throw ConfigError("model.block.sfeb_dilations must not be empty");
    if (b.sfeb_kernel < 1 || b.sfeb_kernel % 2 == 0) {
      throw ConfigError("model.block.sfeb_kernel must be a positive odd integer");
    }
    if (b.attention_kernel < 1 || b.attention_kernel % 2 == 0) {
      throw ConfigError("model.block.attention_kernel must be a positive odd integer");
    }
  }
}

Index level_channels(const ModelConfig& cfg, Index level) { return cfg.base_channels << level; }

bool uses_experts(const ModelConfig& cfg) { return cfg.block.enabled_count() > 0; }

GmMoeBlockConfig block_config(const ModelConfig& cfg, Index level) {
  GmMoeBlockConfig b = cfg.block;
  b.channels = level_channels(cfg, level);
  return b;
}

template <typename Scalar>
Model<Scalar> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Model<Scalar> model{cfg, {}};
  Rng rng(seed);
  ParamBuilder<Scalar> root(model.params, rng);
  const Index c = cfg.base_channels;
  const Index levels = cfg.num_levels;

  root.conv("stem", 3, c, 3);
  if (cfg.enable_sfeb) add_sfeb_params(root, block_config(cfg, 0));
  for (Index l = 0; l < levels; ++l) {
    const std::string stage = "enc" + std::to_string(l);
    for (Index b = 0; b < cfg.blocks_per_level[l]; ++b) add_block(root, cfg, block_path(stage, b), l);
    root.conv(stage + ".down", 4 * level_channels(cfg, l), level_channels(cfg, l + 1), 1);
  }
  for (Index b = 0; b < cfg.blocks_per_level[levels]; ++b) {
    add_block(root, cfg, block_path("bottleneck", b), levels);
  }
  for (Index l = levels - 1; l >= 0; --l) {
    const std::string stage = "dec" + std::to_string(l);
    const Index cl = level_channels(cfg, l);
    root.conv(stage + ".up", 2 * cl, 4 * cl, 1);
    root.conv(stage + ".fuse", 2 * cl, cl, 1);
    for (Index b = 0; b < cfg.blocks_per_level[l]; ++b) add_block(root, cfg, block_path(stage, b), l);
  }
  add_block(root, cfg, "refine", 0);
  if (cfg.zero_init_output) {
    root.zero_conv("head", c, 3, 3);
  } else {
    root.conv("head", c, 3, 3);
  }
  return model;
}

template <typename Scalar>
Var<Scalar> forward(const Model<Scalar>& model, const Var<Scalar>& image) {
  const ModelConfig& cfg = model.config;
  const Shape s = image.shape();
  if (s.n < 1) throw ShapeError("forward: empty batch");
  if (s.c != 3) throw ShapeError("forward: expected 3 channels, got " + s.str());
  if (s.h < 1 || s.w < 1) throw ShapeError("forward: empty image " + s.str());

  // The colour expert halves the bottleneck once more, so it needs >= 2 px there.
  const Index multiple = Index(1) << cfg.num_levels;
  const Index min_extent = cfg.block.enable_expert1 && uses_experts(cfg) ? 2 * multiple : multiple;
  auto padded = [&](Index v) {
    const Index t = std::max(v, min_extent);
    return (t + multiple - 1) / multiple * multiple;
  };
  const Var<Scalar> input = reflect_pad(image, padded(s.h) - s.h, padded(s.w) - s.w);

  const BlockParams<Scalar>& p = model.params;
  Var<Scalar> f = conv_named(input, p, "stem", 1);
  if (cfg.enable_sfeb) f = sfeb(f, p.scope(""), block_config(cfg, 0));

  std::vector<Var<Scalar>> skips;
  for (Index l = 0; l < cfg.num_levels; ++l) {
    const std::string stage = "enc" + std::to_string(l);
    for (Index b = 0; b < cfg.blocks_per_level[l]; ++b) f = run_block(f, model, block_path(stage, b), l);
    skips.push_back(f);
    f = conv_named(pixel_unshuffle(f, 2), p, stage + ".down");
  }
  for (Index b = 0; b < cfg.blocks_per_level[cfg.num_levels]; ++b) {
    f = run_block(f, model, block_path("bottleneck", b), cfg.num_levels);
  }
  for (Index l = cfg.num_levels - 1; l >= 0; --l) {
    const std::string stage = "dec" + std::to_string(l);
    f = pixel_shuffle(conv_named(f, p, stage + ".up"), 2);
    const Var<Scalar> both[] = {f, skips[l]};
    f = conv_named(concat_channels<Scalar>(both), p, stage + ".fuse");
    for (Index b = 0; b < cfg.blocks_per_level[l]; ++b) f = run_block(f, model, block_path(stage, b), l);
  }
  f = run_block(f, model, "refine", 0);
  const Var<Scalar> residual = conv_named(f, p, "head", 1);
  const Var<Scalar> out = clamp(add(input, residual), Scalar(0), Scalar(1));
  return crop(out, s.h, s.w);
}

template <typename Scalar>
Tensor<Scalar> enhance(const Model<Scalar>& model, const Tensor<Scalar>& image) {
  NoGradGuard guard;
  return forward(model, constant(image)).value();
}

template <typename Scalar>
std::set<std::string> component_set(const BlockParams<Scalar>& params) {
  static const char* kComponents[] = {"sfeb", "gate", "expert1", "expert2", "expert3"};
  const std::set<std::string> segs = params.segments();
  std::set<std::string> out;
  for (const char* c : kComponents) {
    if (segs.count(c)) out.insert(c);
  }
  return out;
}

template Model<float> build_model(const ModelConfig&, std::uint64_t);
template Model<double> build_model(const ModelConfig&, std::uint64_t);
template Var<float> forward(const Model<float>&, const Var<float>&);
template Var<double> forward(const Model<double>&, const Var<double>&);
template Tensor<float> enhance(const Model<float>&, const Tensor<float>&);
template Tensor<double> enhance(const Model<double>&, const Tensor<double>&);
template std::set<std::string> component_set(const BlockParams<float>&);
template std::set<std::string> component_set(const BlockParams<double>&);

}  // namespace gmmoe
