// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <toml.hpp>

namespace gmmoe {
namespace {

using json = nlohmann::json;

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& obj, std::string name) : obj_(obj), name_(std::move(name)) {
    if (!obj_.is_object()) throw ConfigError(name_ + ": expected a table");
  }

  bool has(const char* key) const { return obj_.contains(key); }
  const json& raw(const char* key) {
    seen_.insert(key);
    return obj_.at(key);
  }
  std::string field(const char* key) const { return name_.empty() ? key : name_ + "." + key; }

  template <typename T>
  void read(const char* key, T& out) {
    if (!has(key)) return;
    out = convert<T>(raw(key), field(key));
  }

  template <typename T>
  void read(const char* key, std::optional<T>& out) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (v.is_null()) {
      out.reset();
    } else {
      out = convert<T>(v, field(key));
    }
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + field(key.c_str()) + "'");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& field) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<std::int64_t>() < 0) throw ConfigError(field + ": expected a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field + ": expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) throw ConfigError(field + ": expected an array");
      T out;
      for (const auto& e : v) out.push_back(convert<typename T::value_type>(e, field + "[]"));
      return out;
    }
  }

 private:
  const json& obj_;
  std::string name_;
  std::set<std::string> seen_;
};

json toml_to_json(const toml::node& node, const std::string& where) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) {
      const std::string key(k.str());
      out[key] = toml_to_json(v, where.empty() ? key : where + "." + key);
    }
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(toml_to_json(v, where));
    return out;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  throw ConfigError(where + ": dates and times are not supported");
}

ModelConfig model_from_section(Section& s) {
  ModelConfig m = ModelConfig::small();
  if (s.has("preset")) {
    const auto name = Section::convert<std::string>(s.raw("preset"), s.field("preset"));
    if (name == "tiny") {
      m = ModelConfig::tiny();
    } else if (name == "small" || name == "default") {
      m = ModelConfig::small();
    } else if (name == "full") {
      m = ModelConfig::full();
    } else {
      throw ConfigError(s.field("preset") + ": unknown preset '" + name + "' (expected tiny, small, full)");
    }
  }
  s.read("base_channels", m.base_channels);
  s.read("num_levels", m.num_levels);
  s.read("blocks_per_level", m.blocks_per_level);
  s.read("enable_sfeb", m.enable_sfeb);
  s.read("zero_init_output", m.zero_init_output);
  if (s.has("block")) {
    Section b(s.raw("block"), s.field("block"));
    b.read("enable_expert1", m.block.enable_expert1);
    b.read("enable_expert2", m.block.enable_expert2);
    b.read("enable_expert3", m.block.enable_expert3);
    b.read("enable_gate", m.block.enable_gate);
    b.read("sfeb_dilations", m.block.sfeb_dilations);
    b.read("sfeb_kernel", m.block.sfeb_kernel);
    b.read("attention_kernel", m.block.attention_kernel);
    b.finish();
  }
  s.finish();
  return m;
}

}  // namespace

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["base_channels"] = cfg.base_channels;
  j["num_levels"] = cfg.num_levels;
  j["blocks_per_level"] = cfg.blocks_per_level;
  j["enable_sfeb"] = cfg.enable_sfeb;
  j["zero_init_output"] = cfg.zero_init_output;
  j["block"] = {{"enable_expert1", cfg.block.enable_expert1},   {"enable_expert2", cfg.block.enable_expert2},
                {"enable_expert3", cfg.block.enable_expert3},   {"enable_gate", cfg.block.enable_gate},
                {"sfeb_dilations", cfg.block.sfeb_dilations},   {"sfeb_kernel", cfg.block.sfeb_kernel},
                {"attention_kernel", cfg.block.attention_kernel}};
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  Section s(j, "model");
  ModelConfig m = model_from_section(s);
  validate(m);
  return m;
}

RunConfig parse_run_config_json(const nlohmann::json& j) {
  Section root(j, "");
  RunConfig cfg;
  if (root.has("model")) {
    Section s(root.raw("model"), "model");
    cfg.model = model_from_section(s);
  }
  if (root.has("train")) {
    Section s(root.raw("train"), "train");
    TrainConfig& t = cfg.train;
    s.read("lr0", t.lr0);
    s.read("milestones", t.milestones);
    s.read("gamma", t.gamma);
    s.read("beta1", t.beta1);
    s.read("beta2", t.beta2);
    s.read("adam_eps", t.adam_eps);
    s.read("batch_size", t.batch_size);
    s.read("patch", t.patch);
    s.read("total_iters", t.total_iters);
    s.read("master_seed", t.master_seed);
    s.read("checkpoint_every", t.checkpoint_every);
    s.read("log_every", t.log_every);
    s.read("grad_clip", t.grad_clip);
    s.read("loss_eps", t.loss_eps);
    s.finish();
  }
  if (root.has("data")) {
    Section s(root.raw("data"), "data");
    DataConfig& d = cfg.data;
    if (s.has("layout")) d.layout = parse_layout(Section::convert<std::string>(s.raw("layout"), "data.layout"));
    if (s.has("patch_mode")) {
      d.patch_mode = parse_patch_mode(Section::convert<std::string>(s.raw("patch_mode"), "data.patch_mode"));
    }
    s.read("rotations", d.augment.rotations);
    s.read("hflip", d.augment.hflip);
    s.read("vflip", d.augment.vflip);
    s.finish();
  }
  if (root.has("ablation")) {
    Section s(root.raw("ablation"), "ablation");
    s.read("preset", cfg.ablation.preset);
    s.finish();
  }
  root.finish();
  validate(cfg);
  return cfg;
}

RunConfig parse_run_config_toml(const std::string& text) {
  toml::table table;
  try {
    table = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "TOML parse error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
  return parse_run_config_json(toml_to_json(table, ""));
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  if (path.extension() == ".json") {
    json j;
    try {
      j = json::parse(ss.str());
    } catch (const json::exception& e) {
      throw ConfigError("JSON parse error in " + path.string() + ": " + e.what());
    }
    return parse_run_config_json(j);
  }
  return parse_run_config_toml(ss.str());
}

void validate(const RunConfig& cfg) {
  validate(cfg.model);
  validate(cfg.train);
  cfg.data.augment.validate();
  if (cfg.ablation.preset) ablation_preset(*cfg.ablation.preset);
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["model"] = model_config_to_json(cfg.model);
  const TrainConfig& t = cfg.train;
  nlohmann::ordered_json train;
  train["lr0"] = t.lr0;
  train["milestones"] = t.milestones;
  train["gamma"] = t.gamma;
  train["beta1"] = t.beta1;
  train["beta2"] = t.beta2;
  train["adam_eps"] = t.adam_eps;
  train["batch_size"] = t.batch_size;
  train["patch"] = t.patch;
  train["total_iters"] = t.total_iters;
  train["master_seed"] = t.master_seed;
  train["checkpoint_every"] = t.checkpoint_every;
  train["log_every"] = t.log_every;
  train["grad_clip"] = t.grad_clip ? nlohmann::ordered_json(*t.grad_clip) : nlohmann::ordered_json(nullptr);
  train["loss_eps"] = t.loss_eps;
  j["train"] = train;
  j["data"] = {{"layout", to_string(cfg.data.layout)},
               {"patch_mode", to_string(cfg.data.patch_mode)},
               {"rotations", cfg.data.augment.rotations},
               {"hflip", cfg.data.augment.hflip},
               {"vflip", cfg.data.augment.vflip}};
  j["ablation"] = nlohmann::ordered_json::object();
  if (cfg.ablation.preset) j["ablation"]["preset"] = *cfg.ablation.preset;
  return j;
}

std::string config_digest(const RunConfig& cfg) {
  const std::string canonical = to_json(cfg).dump();
  return hex64(fnv1a(canonical.data(), canonical.size()));
}

}  // namespace gmmoe
