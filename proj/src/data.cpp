// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace gmmoe {
namespace fs = std::filesystem;
namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool is_image_file(const fs::path& p) {
  static const std::array<const char*, 5> kExt = {".png", ".jpg", ".jpeg", ".bmp", ".tif"};
  const std::string ext = lower(p.extension().string());
  return std::find(kExt.begin(), kExt.end(), ext) != kExt.end();
}

// First sub-directory of `parent` whose name matches one candidate, ignoring case.
std::optional<fs::path> find_dir(const fs::path& parent, std::initializer_list<const char*> candidates) {
  if (!fs::is_directory(parent)) return std::nullopt;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(parent)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const char* c : candidates) {
    for (const auto& d : dirs) {
      if (lower(d.filename().string()) == lower(c)) return d;
    }
  }
  return std::nullopt;
}

fs::path require_dir(const fs::path& parent, std::initializer_list<const char*> candidates) {
  auto d = find_dir(parent, candidates);
  if (!d) {
    std::string names;
    for (const char* c : candidates) names += (names.empty() ? "" : "|") + std::string(c);
    throw DataError("dataset directory not found: " + (parent / names).string());
  }
  return *d;
}

// Pairing key: the stem, minus a leading "low"/"normal"/"high" tag for
// layouts whose two folders use different prefixes.
std::string pair_key(const fs::path& file, Layout layout) {
  std::string stem = file.stem().string();
  if (layout == Layout::lol_v2_real) {
    const std::string l = lower(stem);
    for (const char* tag : {"normal", "high", "low"}) {
      const std::string t(tag);
      if (l.rfind(t, 0) == 0) return stem.substr(t.size());
    }
  }
  return stem;
}

std::map<std::string, fs::path> list_images(const fs::path& dir, Layout layout) {
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_image_file(e.path())) continue;
    const std::string key = pair_key(e.path(), layout);
    if (!out.emplace(key, e.path()).second) {
      throw PairingError("ambiguous pairing key '" + key + "' in " + dir.string());
    }
  }
  return out;
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

std::optional<std::pair<Index, Index>> png_dimensions(std::ifstream& in) {
  unsigned char head[24];
  in.seekg(0);
  if (!in.read(reinterpret_cast<char*>(head), 24)) return std::nullopt;
  static const unsigned char kSig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (!std::equal(kSig, kSig + 8, head) || std::string(reinterpret_cast<char*>(head + 12), 4) != "IHDR") {
    return std::nullopt;
  }
  return std::pair<Index, Index>{be32(head + 16), be32(head + 20)};
}

std::optional<std::pair<Index, Index>> jpeg_dimensions(std::ifstream& in) {
  in.seekg(0);
  unsigned char soi[2];
  if (!in.read(reinterpret_cast<char*>(soi), 2) || soi[0] != 0xFF || soi[1] != 0xD8) return std::nullopt;
  while (in) {
    unsigned char marker[2];
    if (!in.read(reinterpret_cast<char*>(marker), 2) || marker[0] != 0xFF) return std::nullopt;
    const unsigned char m = marker[1];
    if (m == 0xD8 || (m >= 0xD0 && m <= 0xD7) || m == 0x01) continue;
    unsigned char len[2];
    if (!in.read(reinterpret_cast<char*>(len), 2)) return std::nullopt;
    const int size = (len[0] << 8) | len[1];
    const bool sof = m >= 0xC0 && m <= 0xCF && m != 0xC4 && m != 0xC8 && m != 0xCC;
    if (sof) {
      unsigned char body[5];
      if (!in.read(reinterpret_cast<char*>(body), 5)) return std::nullopt;
      return std::pair<Index, Index>{(body[3] << 8) | body[4], (body[1] << 8) | body[2]};
    }
    in.seekg(size - 2, std::ios::cur);
  }
  return std::nullopt;
}

ImageBatch resize_bilinear(const ImageBatch& img, Index h, Index w) {
  ImageBatch out(Shape{1, 3, h, w});
  for (Index c = 0; c < 3; ++c) {
    cv::Mat src(static_cast<int>(img.shape().h), static_cast<int>(img.shape().w), CV_32F,
                const_cast<float*>(img.plane(0, c)));
    cv::Mat dst(static_cast<int>(h), static_cast<int>(w), CV_32F, out.plane(0, c));
    cv::resize(src, dst, dst.size(), 0, 0, cv::INTER_LINEAR);
  }
  return out;
}

ImageBatch crop_window(const ImageBatch& img, Index y0, Index x0, Index h, Index w) {
  ImageBatch out(Shape{1, 3, h, w});
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < h; ++y) {
      std::copy_n(img.plane(0, c) + (y0 + y) * img.shape().w + x0, w, out.plane(0, c) + y * w);
    }
  }
  return out;
}

}  // namespace

Layout parse_layout(const std::string& name) {
  const std::string l = lower(name);
  if (l == "lol_v1") return Layout::lol_v1;
  if (l == "lol_v2_real") return Layout::lol_v2_real;
  if (l == "lol_v2_syn") return Layout::lol_v2_syn;
  if (l == "lsrw") return Layout::lsrw;
  if (l == "generic_paired") return Layout::generic_paired;
  throw ConfigError("unknown dataset layout '" + name +
                    "' (expected lol_v1, lol_v2_real, lol_v2_syn, lsrw, generic_paired)");
}

std::string to_string(Layout layout) {
  switch (layout) {
    case Layout::lol_v1: return "lol_v1";
    case Layout::lol_v2_real: return "lol_v2_real";
    case Layout::lol_v2_syn: return "lol_v2_syn";
    case Layout::lsrw: return "lsrw";
    case Layout::generic_paired: return "generic_paired";
  }
  return "generic_paired";
}

Split parse_split(const std::string& name) {
  const std::string l = lower(name);
  if (l == "train") return Split::train;
  if (l == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "' (expected train or test)");
}

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

nlohmann::ordered_json DatasetManifest::to_json() const {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["split"] = to_string(split);
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : pairs) {
    j["pairs"].push_back({{"id", p.id}, {"low_path", p.low_path.string()}, {"gt_path", p.gt_path.string()}});
  }
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.name = j.at("name").get<std::string>();
  m.split = parse_split(j.at("split").get<std::string>());
  for (const auto& p : j.at("pairs")) {
    m.pairs.push_back({p.at("id").get<std::string>(), p.at("low_path").get<std::string>(),
                       p.at("gt_path").get<std::string>()});
  }
  return m;
}

std::pair<Index, Index> image_dimensions(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open image " + path.string());
  if (auto d = png_dimensions(in)) return *d;
  in.clear();
  if (auto d = jpeg_dimensions(in)) return *d;
  const Image8 img = decode_image8(path);
  return {img.width, img.height};
}

DatasetManifest load_manifest(const fs::path& root, Layout layout, Split split) {
  if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
  const bool train = split == Split::train;
  fs::path split_dir;
  fs::path low_dir, gt_dir;
  switch (layout) {
    case Layout::lol_v1:
      split_dir = require_dir(root, {train ? "our485" : "eval15"});
      low_dir = require_dir(split_dir, {"low"});
      gt_dir = require_dir(split_dir, {"high"});
      break;
    case Layout::lol_v2_real:
    case Layout::lol_v2_syn:
      split_dir = require_dir(root, {train ? "Train" : "Test"});
      low_dir = require_dir(split_dir, {"Low"});
      gt_dir = require_dir(split_dir, {"Normal", "high"});
      break;
    case Layout::lsrw:
      split_dir = train ? require_dir(root, {"Training data", "train"}) : require_dir(root, {"Eval", "test"});
      low_dir = require_dir(split_dir, {"low"});
      gt_dir = require_dir(split_dir, {"high"});
      break;
    case Layout::generic_paired:
      split_dir = find_dir(root, {train ? "train" : "test"}).value_or(root);
      low_dir = require_dir(split_dir, {"low"});
      gt_dir = require_dir(split_dir, {"high"});
      break;
  }

  const auto lows = list_images(low_dir, layout);
  const auto gts = list_images(gt_dir, layout);
  for (const auto& [key, path] : lows) {
    if (!gts.count(key)) throw PairingError("orphan low-light image without ground truth: " + path.string());
  }
  for (const auto& [key, path] : gts) {
    if (!lows.count(key)) throw PairingError("orphan ground-truth image without low-light input: " + path.string());
  }
  if (lows.empty()) throw PairingError("no image pairs found under " + split_dir.string());

  DatasetManifest m;
  m.name = to_string(layout) + ":" + root.filename().string();
  m.split = split;
  for (const auto& [key, low_path] : lows) {
    const fs::path& gt_path = gts.at(key);
    const auto a = image_dimensions(low_path);
    const auto b = image_dimensions(gt_path);
    if (a != b) {
      throw IntegrityError("pair '" + key + "' has mismatched dimensions: " + low_path.string() + " is " +
                           std::to_string(a.first) + "x" + std::to_string(a.second) + ", " + gt_path.string() +
                           " is " + std::to_string(b.first) + "x" + std::to_string(b.second));
    }
    m.pairs.push_back({key, low_path, gt_path});
  }
  return m;
}

Image8 decode_image8(const fs::path& path) {
  const cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw DecodeError("cannot decode image " + path.string());
  if (raw.depth() != CV_8U) throw DecodeError("unsupported bit depth (need 8-bit): " + path.string());
  cv::Mat rgb;
  switch (raw.channels()) {
    case 1: cv::cvtColor(raw, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(raw, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw DecodeError("unsupported channel count in " + path.string());
  }
  Image8 img;
  img.height = rgb.rows;
  img.width = rgb.cols;
  img.rgb.resize(static_cast<std::size_t>(img.height * img.width * 3));
  for (int y = 0; y < rgb.rows; ++y) {
    std::copy_n(rgb.ptr<std::uint8_t>(y), img.width * 3, img.rgb.data() + y * img.width * 3);
  }
  return img;
}

ImageBatch to_tensor(const Image8& image) {
  ImageBatch out(Shape{1, 3, image.height, image.width});
  const Index plane = image.height * image.width;
  for (Index p = 0; p < plane; ++p) {
    for (Index c = 0; c < 3; ++c) out.plane(0, c)[p] = static_cast<float>(image.rgb[p * 3 + c]) / 255.0f;
  }
  return out;
}

ImageBatch decode_image(const fs::path& path) { return to_tensor(decode_image8(path)); }

void encode_png(const ImageBatch& image, const fs::path& path) {
  const Shape s = image.shape();
  if (s.n < 1 || s.c != 3) throw ShapeError("encode_png: expected (N, 3, H, W), got " + s.str());
  cv::Mat bgr(static_cast<int>(s.h), static_cast<int>(s.w), CV_8UC3);
  for (Index y = 0; y < s.h; ++y) {
    auto* row = bgr.ptr<std::uint8_t>(static_cast<int>(y));
    for (Index x = 0; x < s.w; ++x) {
      for (Index c = 0; c < 3; ++c) {
        const float v = std::clamp(image(0, c, y, x), 0.0f, 1.0f);
        row[x * 3 + (2 - c)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image " + path.string());
}

Dihedral Dihedral::operator*(const Dihedral& other) const {
  const int r = flip ? rot - other.rot : rot + other.rot;
  return {((r % 4) + 4) % 4, flip != other.flip};
}

Dihedral Dihedral::inverse() const {
  if (flip) return *this;
  return {(4 - rot) % 4, false};
}

std::vector<Dihedral> Dihedral::all() {
  std::vector<Dihedral> out;
  for (bool f : {false, true}) {
    for (int r = 0; r < 4; ++r) out.push_back({r, f});
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> apply(const Dihedral& d, const Tensor<Scalar>& x) {
  const Shape s = x.shape();
  const bool swap = d.rot % 2 == 1;
  Tensor<Scalar> out(Shape{s.n, s.c, swap ? s.w : s.h, swap ? s.h : s.w});
  const Index oh = out.shape().h, ow = out.shape().w;
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* src = x.plane(n, c);
      Scalar* dst = out.plane(n, c);
      for (Index i = 0; i < oh; ++i) {
        for (Index j = 0; j < ow; ++j) {
          // Source pixel of the flipped image, then of the original.
          Index si = 0, sj = 0;
          switch (d.rot) {
            case 0: si = i; sj = j; break;
            case 1: si = j; sj = s.w - 1 - i; break;
            case 2: si = s.h - 1 - i; sj = s.w - 1 - j; break;
            default: si = s.h - 1 - j; sj = i; break;
          }
          if (d.flip) sj = s.w - 1 - sj;
          dst[i * ow + j] = src[si * s.w + sj];
        }
      }
    }
  }
  return out;
}

template Tensor<float> apply(const Dihedral&, const Tensor<float>&);
template Tensor<double> apply(const Dihedral&, const Tensor<double>&);

void AugmentSpec::validate() const {
  if (rotations.empty()) throw ConfigError("data.rotations must not be empty (use [0] to disable)");
  for (int r : rotations) {
    if (r % 90 != 0 || r < 0 || r >= 360) {
      throw ConfigError("data.rotations entries must be one of 0, 90, 180, 270");
    }
  }
}

Dihedral AugmentSpec::sample(Rng& rng) const {
  const int degrees = rotations[uniform_index(rng, rotations.size())];
  Dihedral d;
  if (hflip && coin(rng)) d = Dihedral::hflip() * d;
  if (vflip && coin(rng)) d = Dihedral::vflip() * d;
  return Dihedral::rotation(degrees / 90) * d;
}

PatchMode parse_patch_mode(const std::string& name) {
  const std::string l = lower(name);
  if (l == "crop") return PatchMode::crop;
  if (l == "resize") return PatchMode::resize;
  throw ConfigError("unknown patch mode '" + name + "' (expected crop or resize)");
}

std::string to_string(PatchMode mode) { return mode == PatchMode::crop ? "crop" : "resize"; }

ImagePair sample_training_patch(const ImagePair& full, Index patch, PatchMode mode, const AugmentSpec& aug,
                                Rng& rng) {
  const Shape s = full.low.shape();
  if (full.gt.shape() != s) throw IntegrityError("sample_training_patch: low/gt shapes differ");
  if (patch < 1) throw ConfigError("patch size must be positive");
  ImagePair out;
  if (mode == PatchMode::crop) {
    if (patch > s.h || patch > s.w) {
      throw InputTooSmallError("patch " + std::to_string(patch) + " larger than image " + s.str());
    }
    const Index y0 = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(s.h - patch + 1)));
    const Index x0 = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(s.w - patch + 1)));
    out.low = crop_window(full.low, y0, x0, patch, patch);
    out.gt = crop_window(full.gt, y0, x0, patch, patch);
  } else {
    out.low = resize_bilinear(full.low, patch, patch);
    out.gt = resize_bilinear(full.gt, patch, patch);
  }
  const Dihedral d = aug.sample(rng);
  out.low = apply(d, out.low);
  out.gt = apply(d, out.gt);
  return out;
}

ImagePair sample_training_patch(const DatasetManifest& manifest, std::size_t index, Index patch, PatchMode mode,
                                const AugmentSpec& aug, Rng& rng) {
  return sample_training_patch(eval_pair(manifest, index), patch, mode, aug, rng);
}

ImagePair eval_pair(const DatasetManifest& manifest, std::size_t index) {
  if (index >= manifest.pairs.size()) {
    throw std::out_of_range("pair index " + std::to_string(index) + " out of range (" +
                            std::to_string(manifest.pairs.size()) + " pairs)");
  }
  const PairEntry& e = manifest.pairs[index];
  ImagePair pair{decode_image(e.low_path), decode_image(e.gt_path)};
  if (pair.low.shape() != pair.gt.shape()) {
    throw IntegrityError("pair '" + e.id + "' decodes to different shapes");
  }
  return pair;
}

PairCache::PairCache(DatasetManifest manifest) : manifest_(std::move(manifest)), cache_(manifest_.pairs.size()) {}

ImagePair PairCache::get(std::size_t index) const {
  if (index >= cache_.size()) throw std::out_of_range("pair index out of range");
  auto& slot = cache_[index];
  if (!slot) {
    const PairEntry& e = manifest_.pairs[index];
    slot.emplace(decode_image8(e.low_path), decode_image8(e.gt_path));
    if (slot->first.height != slot->second.height || slot->first.width != slot->second.width) {
      throw IntegrityError("pair '" + e.id + "' decodes to different shapes");
    }
  }
  return {to_tensor(slot->first), to_tensor(slot->second)};
}

}  // namespace gmmoe
