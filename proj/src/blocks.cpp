// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/blocks.hpp"

#include <algorithm>
#include <string>

namespace gmmoe {
namespace {

template <typename Scalar>
Var<Scalar> conv(const Var<Scalar>& x, const ParamScope<Scalar>& p, std::string_view name,
                 Conv2dOptions opts = {}) {
  const Var<Scalar>& w = p[std::string(name) + ".weight"];
  const std::string bias_name = std::string(name) + ".bias";
  const Var<Scalar> b = p.has(bias_name) ? p[bias_name] : Var<Scalar>();
  return conv2d(x, w, b, opts);
}

// Same-size conv with odd kernel k (and optional dilation).
template <typename Scalar>
Var<Scalar> conv_same(const Var<Scalar>& x, const ParamScope<Scalar>& p, std::string_view name,
                      Index dilation = 1, Index groups = 1) {
  const Index k = p[std::string(name) + ".weight"].shape().h;
  return conv(x, p, name, Conv2dOptions{1, dilation * (k - 1) / 2, dilation, groups});
}

template <typename Scalar>
void check_channels(const Var<Scalar>& x, const GmMoeBlockConfig& cfg, const char* op) {
  if (x.shape().c != cfg.channels) {
    throw ConfigError(std::string(op) + ": input has " + std::to_string(x.shape().c) +
                      " channels, block configured for " + std::to_string(cfg.channels));
  }
}

}  // namespace

void validate(const GmMoeBlockConfig& cfg) {
  if (cfg.channels < 1) throw ConfigError("block.channels must be positive");
  if (cfg.enabled_count() == 0) throw ConfigError("block: at least one expert must be enabled");
  if (cfg.sfeb_dilations.empty()) throw ConfigError("block.sfeb_dilations must not be empty");
  for (Index d : cfg.sfeb_dilations) {
    if (d < 1) throw ConfigError("block.sfeb_dilations entries must be positive");
  }
  if (cfg.sfeb_kernel < 1 || cfg.sfeb_kernel % 2 == 0) {
    throw ConfigError("block.sfeb_kernel must be a positive odd integer");
  }
  if (cfg.attention_kernel < 1 || cfg.attention_kernel % 2 == 0) {
    throw ConfigError("block.attention_kernel must be a positive odd integer");
  }
}

Index gate_hidden_width(Index channels) { return std::max<Index>(channels / 4, 8); }
Index attention_hidden_width(Index channels) { return std::max<Index>(channels / 4, 4); }

// ---------------------------------------------------------------------------

template <typename Scalar>
void add_gate_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg) {
  auto g = b.sub("gate");
  const Index hidden = gate_hidden_width(cfg.channels);
  g.conv("fc1", cfg.channels, hidden, 1);
  g.conv("fc2", hidden, 3, 1);
}

template <typename Scalar>
void add_expert_color_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg) {
  auto e = b.sub("expert1");
  const Index c = cfg.channels;
  e.conv("down", c, 2 * c, 3);
  e.conv("body", 2 * c, 2 * c, 3);
  e.conv("proj", 2 * c, c, 1);
}

template <typename Scalar>
void add_expert_detail_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg) {
  auto e = b.sub("expert2");
  const Index c = cfg.channels;
  e.conv("conv", c, c, 3);
  e.conv("ca_fc1", c, attention_hidden_width(c), 1);
  e.conv("ca_fc2", attention_hidden_width(c), c, 1);
  e.conv("sa_conv", 2, 1, cfg.attention_kernel);
  e.conv("proj", 2 * c, c, 1);
}

template <typename Scalar>
void add_expert_feature_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg) {
  auto e = b.sub("expert3");
  const Index c = cfg.channels;
  e.conv("branch1", c, c, 1);
  e.conv("branch3", c, c, 3);
  e.conv("branch5", c, c, 5);
  e.conv("fuse", 3 * c, 2 * c, 1);
  e.conv("sca", c, c, 1);
  e.conv("proj", c, c, 1);
}

template <typename Scalar>
void add_sfeb_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg) {
  auto s = b.sub("sfeb");
  const Index c = cfg.channels;
  s.conv("depthwise", c, c, cfg.sfeb_kernel, c);
  s.conv("pointwise", c, c, 1);
  for (Index d : cfg.sfeb_dilations) s.conv("dilated" + std::to_string(d), c, c, 3);
  s.conv("compress1", c, c, 1);
  s.conv("compress2", c * static_cast<Index>(cfg.sfeb_dilations.size()), c, 1);
  s.conv("attention", 2, 2, cfg.attention_kernel);
  s.conv("mask", c, c, 1);
}

template <typename Scalar>
void add_gm_moe_block_params(ParamBuilder<Scalar> b, const GmMoeBlockConfig& cfg) {
  validate(cfg);
  if (cfg.enable_gate) add_gate_params(b, cfg);
  if (cfg.enable_expert1) add_expert_color_params(b, cfg);
  if (cfg.enable_expert2) add_expert_detail_params(b, cfg);
  if (cfg.enable_expert3) add_expert_feature_params(b, cfg);
}

template <typename Scalar>
void add_plain_block_params(ParamBuilder<Scalar> b, Index channels) {
  auto p = b.sub("plain");
  p.conv("conv1", channels, channels, 3);
  p.conv("conv2", channels, channels, 3);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> gate_logits(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg) {
  check_channels(x, cfg, "gate_weights");
  const auto g = p.sub("gate");
  if (g["fc1.weight"].shape().c != x.shape().c) {
    throw ConfigError("gate_weights: gate parameters expect " +
                      std::to_string(g["fc1.weight"].shape().c) + " channels");
  }
  Var<Scalar> h = relu(conv(global_avg_pool(x), g, "fc1"));
  return conv(h, g, "fc2");
}

template <typename Scalar>
Var<Scalar> gate_softmax(const Var<Scalar>& logits, const GmMoeBlockConfig& cfg) {
  const auto on = cfg.experts();
  return softmax_channels(logits, std::vector<bool>(on.begin(), on.end()));
}

template <typename Scalar>
Var<Scalar> gate_weights(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg) {
  if (cfg.enable_gate) return gate_softmax(gate_logits(x, p, cfg), cfg);
  check_channels(x, cfg, "gate_weights");
  Tensor<Scalar> w(Shape{x.shape().n, 3, 1, 1});
  const auto on = cfg.experts();
  const Scalar share = Scalar(1) / static_cast<Scalar>(cfg.enabled_count());
  for (Index n = 0; n < w.shape().n; ++n) {
    for (Index i = 0; i < 3; ++i) w(n, i, 0, 0) = on[i] ? share : Scalar(0);
  }
  return constant(std::move(w));
}

template <typename Scalar>
Var<Scalar> expert_color(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg) {
  check_channels(x, cfg, "expert_color");
  const Shape s = x.shape();
  if (s.h < 2 || s.w < 2) {
    throw InputTooSmallError("expert_color: needs H, W >= 2, got " + s.str());
  }
  const auto e = p.sub("expert1");
  Var<Scalar> d = relu(conv(x, e, "down", Conv2dOptions{2, 1, 1, 1}));
  d = relu(conv_same(d, e, "body"));
  d = max_pool2d(d, 3, 1, 1);
  Var<Scalar> u = upsample_bilinear2x(d, s.h, s.w);
  u = conv(u, e, "proj");
  return sigmoid(add(u, x));
}

template <typename Scalar>
Var<Scalar> detail_channel_attention(const Var<Scalar>& f, const ParamScope<Scalar>& p) {
  auto mlp = [&p](const Var<Scalar>& v) { return conv(relu(conv(v, p, "ca_fc1")), p, "ca_fc2"); };
  return sigmoid(add(mlp(global_avg_pool(f)), mlp(global_max_pool(f))));
}

template <typename Scalar>
Var<Scalar> detail_spatial_attention(const Var<Scalar>& f, const ParamScope<Scalar>& p,
                                     const GmMoeBlockConfig& cfg) {
  const Var<Scalar> maps[] = {channel_max(f), channel_mean(f)};
  const Index k = cfg.attention_kernel;
  return sigmoid(conv(concat_channels<Scalar>(maps), p, "sa_conv", Conv2dOptions{1, (k - 1) / 2, 1, 1}));
}

template <typename Scalar>
Var<Scalar> expert_detail(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg) {
  check_channels(x, cfg, "expert_detail");
  const auto e = p.sub("expert2");
  Var<Scalar> f = relu(conv_same(x, e, "conv"));
  const Var<Scalar> branches[] = {mul(f, detail_channel_attention(f, e)),
                                  mul(f, detail_spatial_attention(f, e, cfg))};
  return add(x, conv(concat_channels<Scalar>(branches), e, "proj"));
}

template <typename Scalar>
Var<Scalar> simple_gate(const Var<Scalar>& x) {
  const Index c = x.shape().c;
  if (c % 2 != 0) {
    throw ConfigError("simple_gate: channel count must be even, got " + std::to_string(c));
  }
  return mul(slice_channels(x, 0, c / 2), slice_channels(x, c / 2, c / 2));
}

template <typename Scalar>
Var<Scalar> simplified_channel_attention(const Var<Scalar>& x, const ParamScope<Scalar>& p) {
  const Var<Scalar>& w = p["weight"];
  if (w.shape().c != x.shape().c) {
    throw ConfigError("simplified_channel_attention: projection expects " + std::to_string(w.shape().c) +
                      " channels, input has " + std::to_string(x.shape().c));
  }
  const Var<Scalar> b = p.has("bias") ? p["bias"] : Var<Scalar>();
  return mul(x, conv2d(global_avg_pool(x), w, b));
}

template <typename Scalar>
Var<Scalar> expert_feature(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg) {
  check_channels(x, cfg, "expert_feature");
  const auto e = p.sub("expert3");
  const Var<Scalar> scales[] = {conv_same(x, e, "branch1"), conv_same(x, e, "branch3"),
                                conv_same(x, e, "branch5")};
  Var<Scalar> f = conv(concat_channels<Scalar>(scales), e, "fuse");
  f = simple_gate(f);
  f = simplified_channel_attention(f, e.sub("sca"));
  return add(x, conv(f, e, "proj"));
}

template <typename Scalar>
Var<Scalar> sfeb_fuse(const Var<Scalar>& f1, const Var<Scalar>& a1, const Var<Scalar>& f2,
                      const Var<Scalar>& a2) {
  return add(mul(f1, a1), mul(f2, a2));
}

template <typename Scalar>
SfebTrace<Scalar> sfeb_trace(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg) {
  check_channels(x, cfg, "sfeb");
  if (cfg.sfeb_dilations.empty()) throw ConfigError("sfeb: dilation list must not be empty");
  const auto s = p.sub("sfeb");
  const Index c = cfg.channels;

  SfebTrace<Scalar> t;
  Var<Scalar> f1 = conv(conv_same(x, s, "depthwise", 1, c), s, "pointwise");
  std::vector<Var<Scalar>> dilated;
  for (Index d : cfg.sfeb_dilations) dilated.push_back(conv_same(x, s, "dilated" + std::to_string(d), d));
  Var<Scalar> f2 = dilated.size() == 1 ? dilated[0] : concat_channels<Scalar>(dilated);
  t.f1 = conv(f1, s, "compress1");
  t.f2 = conv(f2, s, "compress2");

  const Var<Scalar> fe = add(t.f1, t.f2);
  const Var<Scalar> pooled[] = {channel_mean(fe), channel_max(fe)};
  const Index k = cfg.attention_kernel;
  const Var<Scalar> maps =
      sigmoid(conv(concat_channels<Scalar>(pooled), s, "attention", Conv2dOptions{1, (k - 1) / 2, 1, 1}));
  t.a1 = slice_channels(maps, 0, 1);
  t.a2 = slice_channels(maps, 1, 1);
  t.fused = sfeb_fuse(t.f1, t.a1, t.f2, t.a2);
  t.mask = sigmoid(conv(t.fused, s, "mask"));
  t.out = mul(x, t.mask);
  return t;
}

template <typename Scalar>
Var<Scalar> sfeb(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg) {
  return sfeb_trace(x, p, cfg).out;
}

template <typename Scalar>
Var<Scalar> fuse_experts(std::span<const Var<Scalar>> outputs, const Var<Scalar>& weights,
                         const GmMoeBlockConfig& cfg) {
  if (outputs.size() != 3) throw ConfigError("fuse_experts: expects three expert slots");
  if (cfg.enabled_count() == 0) throw ConfigError("fuse_experts: all experts disabled");
  const auto on = cfg.experts();
  std::vector<Var<Scalar>> selected;
  std::vector<Var<Scalar>> selected_weights;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!on[i]) continue;
    selected.push_back(outputs[i]);
    selected_weights.push_back(slice_channels(weights, static_cast<Index>(i), 1));
  }
  if (selected.size() == 3) return convex_combine<Scalar>(selected, weights);
  const Var<Scalar> w =
      selected_weights.size() == 1 ? selected_weights[0] : concat_channels<Scalar>(selected_weights);
  return convex_combine<Scalar>(selected, w);
}

template <typename Scalar>
Var<Scalar> gm_moe_block(const Var<Scalar>& x, const ParamScope<Scalar>& p, const GmMoeBlockConfig& cfg,
                         const Tensor<Scalar>* forced_weights) {
  validate(cfg);
  check_channels(x, cfg, "gm_moe_block");
  std::array<Var<Scalar>, 3> outputs;
  if (cfg.enable_expert1) outputs[0] = expert_color(x, p, cfg);
  if (cfg.enable_expert2) outputs[1] = expert_detail(x, p, cfg);
  if (cfg.enable_expert3) outputs[2] = expert_feature(x, p, cfg);
  Var<Scalar> w;
  if (forced_weights) {
    if (forced_weights->shape() != Shape{x.shape().n, 3, 1, 1}) {
      throw ShapeError("gm_moe_block: forced weights must be (B, 3, 1, 1)");
    }
    w = constant(*forced_weights);
  } else {
    w = gate_weights(x, p, cfg);
  }
  return fuse_experts<Scalar>(outputs, w, cfg);
}

template <typename Scalar>
Var<Scalar> plain_block(const Var<Scalar>& x, const ParamScope<Scalar>& p) {
  const auto b = p.sub("plain");
  return add(x, conv_same(relu(conv_same(x, b, "conv1")), b, "conv2"));
}

#define GMMOE_INSTANTIATE_BLOCKS(S)                                                                      \
  template void add_gate_params(ParamBuilder<S>, const GmMoeBlockConfig&);                               \
  template void add_expert_color_params(ParamBuilder<S>, const GmMoeBlockConfig&);                       \
  template void add_expert_detail_params(ParamBuilder<S>, const GmMoeBlockConfig&);                      \
  template void add_expert_feature_params(ParamBuilder<S>, const GmMoeBlockConfig&);                     \
  template void add_sfeb_params(ParamBuilder<S>, const GmMoeBlockConfig&);                               \
  template void add_gm_moe_block_params(ParamBuilder<S>, const GmMoeBlockConfig&);                       \
  template void add_plain_block_params(ParamBuilder<S>, Index);                                          \
  template Var<S> gate_logits(const Var<S>&, const ParamScope<S>&, const GmMoeBlockConfig&);             \
  template Var<S> gate_softmax(const Var<S>&, const GmMoeBlockConfig&);                                  \
  template Var<S> gate_weights(const Var<S>&, const ParamScope<S>&, const GmMoeBlockConfig&);            \
  template Var<S> expert_color(const Var<S>&, const ParamScope<S>&, const GmMoeBlockConfig&);            \
  template Var<S> expert_detail(const Var<S>&, const ParamScope<S>&, const GmMoeBlockConfig&);           \
  template Var<S> detail_channel_attention(const Var<S>&, const ParamScope<S>&);                         \
  template Var<S> detail_spatial_attention(const Var<S>&, const ParamScope<S>&, const GmMoeBlockConfig&); \
  template Var<S> simple_gate(const Var<S>&);                                                            \
  template Var<S> simplified_channel_attention(const Var<S>&, const ParamScope<S>&);                     \
  template Var<S> expert_feature(const Var<S>&, const ParamScope<S>&, const GmMoeBlockConfig&);          \
  template Var<S> sfeb_fuse(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&);                 \
  template SfebTrace<S> sfeb_trace(const Var<S>&, const ParamScope<S>&, const GmMoeBlockConfig&);        \
  template Var<S> sfeb(const Var<S>&, const ParamScope<S>&, const GmMoeBlockConfig&);                    \
  template Var<S> fuse_experts(std::span<const Var<S>>, const Var<S>&, const GmMoeBlockConfig&);         \
  template Var<S> gm_moe_block(const Var<S>&, const ParamScope<S>&, const GmMoeBlockConfig&,             \
                               const Tensor<S>*);                                                        \
  template Var<S> plain_block(const Var<S>&, const ParamScope<S>&);

GMMOE_INSTANTIATE_BLOCKS(float)
GMMOE_INSTANTIATE_BLOCKS(double)

}  // namespace gmmoe
