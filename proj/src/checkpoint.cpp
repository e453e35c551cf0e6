// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "gmmoe/config.hpp"

namespace gmmoe {
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'G', 'M', 'M', 'O', 'E', 'C', 'K', 'P'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeF64 = 1;

template <typename T>
void put(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_tensor(std::string& buf, const std::string& name, const Tensor<float>& t) {
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
  buf += name;
  put<std::uint8_t>(buf, kDtypeF32);
  put<std::uint32_t>(buf, 4);
  const Shape s = t.shape();
  for (Index d : {s.n, s.c, s.h, s.w}) put<std::int64_t>(buf, d);
  buf.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void read_into(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint truncated or malformed");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::string serialize(const Checkpoint& ckpt) {
  std::string buf(kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, kCheckpointFormatVersion);
  const std::string meta = checkpoint_metadata(ckpt).dump();
  put<std::uint64_t>(buf, meta.size());
  buf += meta;
  const std::uint64_t records = ckpt.params.size() + ckpt.optimizer.m.size() + ckpt.optimizer.v.size();
  put<std::uint64_t>(buf, records);
  for (const auto& [path, var] : ckpt.params) put_tensor(buf, "param/" + path, var.value());
  for (const auto& [path, t] : ckpt.optimizer.m) put_tensor(buf, "adam_m/" + path, t);
  for (const auto& [path, t] : ckpt.optimizer.v) put_tensor(buf, "adam_v/" + path, t);
  put<std::uint64_t>(buf, fnv1a(buf.data(), buf.size()));
  return buf;
}

}  // namespace

nlohmann::ordered_json checkpoint_metadata(const Checkpoint& ckpt) {
  nlohmann::ordered_json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["model_config"] = model_config_to_json(ckpt.model_config);
  j["train_iteration"] = ckpt.iteration;
  j["master_seed"] = ckpt.master_seed;
  j["rng_state_digest"] = hex64(ckpt.rng_state_digest);
  j["adam_step"] = ckpt.optimizer.step;
  j["parameter_digest"] = hex64(parameter_digest(ckpt.params));
  j["parameter_count"] = ckpt.params.count_scalars();
  j["config_digest"] = ckpt.config_digest;
  j["run_config"] = ckpt.run_config;
  return j;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const std::string buf = serialize(ckpt);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
  std::ofstream side(path.string() + ".json", std::ios::trunc);
  side << checkpoint_metadata(ckpt).dump(2) << "\n";
  if (!side) throw CheckpointError("cannot write metadata sidecar for " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t header = sizeof(kMagic) + sizeof(std::uint32_t);
  if (buf.size() < header + sizeof(std::uint64_t) || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint or truncated: " + path.string());
  }
  std::uint32_t version = 0;
  std::memcpy(&version, buf.data() + sizeof(kMagic), sizeof(version));
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointFormatVersion) + "): " + path.string());
  }
  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));
  if (fnv1a(buf.data(), body) != stored) {
    throw CheckpointError("checkpoint digest mismatch (truncated or corrupted): " + path.string());
  }

  Reader r(buf, body);
  r.bytes(header);
  nlohmann::ordered_json meta;
  try {
    meta = nlohmann::ordered_json::parse(r.bytes(r.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata unreadable: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.model_config = model_config_from_json(meta.at("model_config"));
    ckpt.iteration = meta.at("train_iteration").get<std::int64_t>();
    ckpt.master_seed = meta.at("master_seed").get<std::uint64_t>();
    ckpt.rng_state_digest = std::stoull(meta.at("rng_state_digest").get<std::string>(), nullptr, 16);
    ckpt.optimizer.step = meta.at("adam_step").get<std::int64_t>();
    ckpt.config_digest = meta.at("config_digest").get<std::string>();
    ckpt.run_config = meta.at("run_config");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint model config invalid: ") + e.what());
  }

  const auto records = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < records; ++i) {
    const std::string name = r.bytes(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint32_t>();
    if (dtype != kDtypeF32 || rank != 4) throw CheckpointError("unsupported record layout for " + name);
    Shape s;
    s.n = r.get<std::int64_t>();
    s.c = r.get<std::int64_t>();
    s.h = r.get<std::int64_t>();
    s.w = r.get<std::int64_t>();
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw CheckpointError("negative extent in " + name);
    Tensor<float> t(s);
    r.read_into(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
    const auto slash = name.find('/');
    const std::string kind = name.substr(0, slash);
    const std::string key = slash == std::string::npos ? std::string() : name.substr(slash + 1);
    if (kind == "param") {
      ckpt.params.add(key, std::move(t));
    } else if (kind == "adam_m") {
      ckpt.optimizer.m.emplace(key, std::move(t));
    } else if (kind == "adam_v") {
      ckpt.optimizer.v.emplace(key, std::move(t));
    } else {
      throw CheckpointError("unknown record " + name);
    }
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint " + path.string());

  const Model<float> reference = build_model<float>(ckpt.model_config, 0);
  if (reference.params.size() != ckpt.params.size()) {
    throw CheckpointError("checkpoint parameters do not match its model config");
  }
  for (const auto& [p, var] : reference.params) {
    if (!ckpt.params.contains(p) || ckpt.params.at(p).shape() != var.shape()) {
      throw CheckpointError("checkpoint parameter missing or misshaped: " + p);
    }
  }
  return ckpt;
}

Checkpoint make_checkpoint(const Model<float>& model, const OptimizerState& opt, std::int64_t iteration,
                           std::uint64_t master_seed) {
  Checkpoint c;
  c.model_config = model.config;
  for (const auto& [path, var] : model.params) c.params.add(path, var.value());
  c.optimizer = opt;
  c.iteration = iteration;
  c.master_seed = master_seed;
  c.rng_state_digest = derive_seed(master_seed, static_cast<std::uint64_t>(iteration));
  return c;
}

Model<float> model_from_checkpoint(const Checkpoint& ckpt) {
  Model<float> m{ckpt.model_config, {}};
  for (const auto& [path, var] : ckpt.params) m.params.add(path, var.value());
  return m;
}

}  // namespace gmmoe
