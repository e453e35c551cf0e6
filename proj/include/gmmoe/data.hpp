// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmmoe/rng.hpp"
#include "gmmoe/tensor.hpp"

namespace gmmoe {

/// Supported directory conventions (sub-directory names match case-insensitively):
///
///   lol_v1          <root>/{our485|eval15}/{low,high}/<name>
///   lol_v2_real     <root>/{Train|Test}/{Low,Normal}/; "low00001.png" pairs
///                   with "normal00001.png"
///   lol_v2_syn      <root>/{Train|Test}/{Low,Normal}/<same name>
///   lsrw            <root>/{Training data|train, Eval|test}/{low,high}/; root
///                   is one device folder (Huawei or Nikon)
///   generic_paired  <root>/{train|test}/{low,high}/<same name>, or
///                   <root>/{low,high} when the split directory is absent
enum class Layout { lol_v1, lol_v2_real, lol_v2_syn, lsrw, generic_paired };
enum class Split { train, test };

Layout parse_layout(const std::string& name);  // throws ConfigError
std::string to_string(Layout layout);
Split parse_split(const std::string& name);    // throws ConfigError
std::string to_string(Split split);

struct PairEntry {
  std::string id;
  std::filesystem::path low_path;
  std::filesystem::path gt_path;
  bool operator==(const PairEntry&) const = default;
};

struct DatasetManifest {
  std::string name;
  Split split = Split::train;
  std::vector<PairEntry> pairs;  // sorted by id

  nlohmann::ordered_json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  bool operator==(const DatasetManifest&) const = default;
};

/// Scans `root` for the given layout and split. Pairs are matched by file
/// name, ordered lexicographically by id, and checked for equal pixel
/// dimensions (read from PNG/JPEG headers when possible).
///
/// Throws DataError if a directory is missing, PairingError for an orphan
/// (the message names the file) or an empty result, IntegrityError for a
/// size mismatch inside a pair.
DatasetManifest load_manifest(const std::filesystem::path& root, Layout layout, Split split);

// Width and height from the file header (PNG, JPEG) or a full decode.
std::pair<Index, Index> image_dimensions(const std::filesystem::path& path);

// 8-bit RGB, row-major interleaved.
struct Image8 {
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> rgb;
};

Image8 decode_image8(const std::filesystem::path& path);
// (1, 3, H, W) in [0, 1], value = raw / 255. Grayscale is replicated to 3
// channels, alpha dropped. Throws DecodeError for unreadable or non-8-bit files.
ImageBatch decode_image(const std::filesystem::path& path);
ImageBatch to_tensor(const Image8& image);
// Writes sample 0 of a (N, 3, H, W) batch as 8-bit PNG, round(clamp(v) * 255).
void encode_png(const ImageBatch& image, const std::filesystem::path& path);

/// Element of the dihedral group of the square: x -> R^rot(F^flip(x)) where
/// F mirrors left-right and R rotates 90 degrees counter-clockwise.
struct Dihedral {
  int rot = 0;  // 0..3
  bool flip = false;

  // (a * b)(x) = a(b(x))
  Dihedral operator*(const Dihedral& other) const;
  Dihedral inverse() const;
  bool operator==(const Dihedral&) const = default;

  static Dihedral rotation(int quarter_turns) { return {((quarter_turns % 4) + 4) % 4, false}; }
  static Dihedral hflip() { return {0, true}; }
  static Dihedral vflip() { return {2, true}; }
  static std::vector<Dihedral> all();
};

template <typename Scalar>
Tensor<Scalar> apply(const Dihedral& d, const Tensor<Scalar>& x);

struct AugmentSpec {
  std::vector<int> rotations{0, 90, 180, 270};  // degrees, multiples of 90
  bool hflip = true;
  bool vflip = true;

  void validate() const;  // throws ConfigError
  // Draws rotation, then hflip and vflip coins, from `rng`.
  Dihedral sample(Rng& rng) const;
};

enum class PatchMode { crop, resize };
PatchMode parse_patch_mode(const std::string& name);
std::string to_string(PatchMode mode);

struct ImagePair {
  ImageBatch low;
  ImageBatch gt;
};

/// One training sample: the same random window (crop) or the same resize,
/// then the same dihedral transform, applied to both images.
/// Crop mode throws InputTooSmallError when patch exceeds the image.
ImagePair sample_training_patch(const ImagePair& full, Index patch, PatchMode mode, const AugmentSpec& aug,
                                Rng& rng);
ImagePair sample_training_patch(const DatasetManifest& manifest, std::size_t index, Index patch,
                                PatchMode mode, const AugmentSpec& aug, Rng& rng);

// Full-resolution pair without augmentation. Throws std::out_of_range.
ImagePair eval_pair(const DatasetManifest& manifest, std::size_t index);

/// Lazily decoded 8-bit copies of every pair of a manifest.
class PairCache {
 public:
  explicit PairCache(DatasetManifest manifest);

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.pairs.size(); }
  ImagePair get(std::size_t index) const;

 private:
  DatasetManifest manifest_;
  mutable std::vector<std::optional<std::pair<Image8, Image8>>> cache_;
};

}  // namespace gmmoe
