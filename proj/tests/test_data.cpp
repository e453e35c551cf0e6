// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <array>
#include <fstream>

#include "gmmoe/data.hpp"
#include "support/test_util.hpp"

using namespace gmmoe;
using namespace gmmoe::testing;

namespace {

// Minimal PNG writer using stored (uncompressed) deflate blocks, independent of
// the library codec. color_type: 0 gray, 2 RGB, 6 RGBA; bit_depth 8 or 16.
std::uint32_t crc32(const std::vector<std::uint8_t>& bytes) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::uint8_t b : bytes) {
    c ^= b;
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return c ^ 0xFFFFFFFFu;
}

void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put32(out, static_cast<std::uint32_t>(data.size()));
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  put32(out, crc32(body));
}

void write_png_bytes(const fs::path& path, int w, int h, int color_type, int bit_depth,
                     const std::vector<std::uint8_t>& samples) {
  const int channels = color_type == 0 ? 1 : color_type == 2 ? 3 : 4;
  const std::size_t row_bytes = std::size_t(w) * channels * (bit_depth / 8);
  std::vector<std::uint8_t> raw;
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), samples.begin() + y * row_bytes, samples.begin() + (y + 1) * row_bytes);
  }
  std::vector<std::uint8_t> z{0x78, 0x01, 0x01, std::uint8_t(raw.size() & 0xFF), std::uint8_t(raw.size() >> 8),
                              std::uint8_t(~raw.size() & 0xFF), std::uint8_t((~raw.size() >> 8) & 0xFF)};
  z.insert(z.end(), raw.begin(), raw.end());
  std::uint32_t a = 1, b = 0;
  for (std::uint8_t v : raw) {
    a = (a + v) % 65521;
    b = (b + a) % 65521;
  }
  put32(z, (b << 16) | a);

  std::vector<std::uint8_t> png{0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  std::vector<std::uint8_t> ihdr;
  put32(ihdr, std::uint32_t(w));
  put32(ihdr, std::uint32_t(h));
  ihdr.insert(ihdr.end(), {std::uint8_t(bit_depth), std::uint8_t(color_type), 0, 0, 0});
  chunk(png, "IHDR", ihdr);
  chunk(png, "IDAT", z);
  chunk(png, "IEND", {});
  fs::create_directories(path.parent_path());
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(png.data()), std::streamsize(png.size()));
}

void write_small(const fs::path& path, std::uint64_t seed, Index h = 4, Index w = 5) {
  write_random_png(path, h, w, seed);
}

std::string id_string(int i, int width = 5) {
  std::string s = std::to_string(i);
  return std::string(std::size_t(width) - s.size(), '0') + s;
}

Tensor<float> pattern(Index h, Index w) {
  Tensor<float> t(Shape{1, 3, h, w});
  for (Index i = 0; i < t.size(); ++i) t[i] = float(i);
  return t;
}

}  // namespace

TEST_CASE("layout and split names") {
  CHECK(parse_layout("lol_v1") == Layout::lol_v1);
  CHECK(parse_layout("LSRW") == Layout::lsrw);
  CHECK(to_string(Layout::lol_v2_syn) == "lol_v2_syn");
  CHECK_THROWS_AS(parse_layout("coco"), ConfigError);
  CHECK(parse_split("test") == Split::test);
  CHECK_THROWS_AS(parse_split("val"), ConfigError);
  CHECK(parse_patch_mode("resize") == PatchMode::resize);
  CHECK_THROWS_AS(parse_patch_mode("squash"), ConfigError);
}

TEST_CASE("LOL-v1 tree with 485 training and 15 test pairs") {
  TempDir dir("lolv1");
  for (int i = 1; i <= 500; ++i) {
    const std::string split = i <= 485 ? "our485" : "eval15";
    write_small(dir / (split + "/low/" + std::to_string(i) + ".png"), std::uint64_t(i));
    write_small(dir / (split + "/high/" + std::to_string(i) + ".png"), std::uint64_t(1000 + i));
  }
  const auto train = load_manifest(dir.path(), Layout::lol_v1, Split::train);
  CHECK(train.pairs.size() == 485);
  CHECK(train.split == Split::train);
  const auto test = load_manifest(dir.path(), Layout::lol_v1, Split::test);
  CHECK(test.pairs.size() == 15);
  CHECK(std::is_sorted(test.pairs.begin(), test.pairs.end(),
                       [](const PairEntry& a, const PairEntry& b) { return a.id < b.id; }));
  for (const auto& p : test.pairs) CHECK(p.low_path.filename() == p.gt_path.filename());
}

TEST_CASE("LOL-v2 synthetic test split with 100 pairs") {
  TempDir dir("lolv2syn");
  for (int i = 0; i < 100; ++i) {
    const std::string name = "r" + id_string(i) + ".png";
    write_small(dir / ("Test/Low/" + name), std::uint64_t(i));
    write_small(dir / ("Test/Normal/" + name), std::uint64_t(500 + i));
  }
  write_small(dir / "Train/Low/a.png", 1);
  write_small(dir / "Train/Normal/a.png", 2);
  CHECK(load_manifest(dir.path(), Layout::lol_v2_syn, Split::test).pairs.size() == 100);
  CHECK(load_manifest(dir.path(), Layout::lol_v2_syn, Split::train).pairs.size() == 1);
}

TEST_CASE("LOL-v2 real pairs by stripped prefix") {
  TempDir dir("lolv2real");
  for (int i = 1; i <= 3; ++i) {
    write_small(dir / ("Train/Low/low" + id_string(i) + ".png"), std::uint64_t(i));
    write_small(dir / ("Train/Normal/normal" + id_string(i) + ".png"), std::uint64_t(10 + i));
  }
  const auto m = load_manifest(dir.path(), Layout::lol_v2_real, Split::train);
  REQUIRE(m.pairs.size() == 3);
  CHECK(m.pairs[0].id == "00001");
  CHECK(m.pairs[0].gt_path.filename() == "normal00001.png");
}

TEST_CASE("LSRW and generic layouts") {
  TempDir dir("lsrw");
  write_small(dir / "Training data/low/x.jpg.png", 1);
  write_small(dir / "Training data/high/x.jpg.png", 2);
  write_small(dir / "Eval/low/y.png", 3);
  write_small(dir / "Eval/high/y.png", 4);
  CHECK(load_manifest(dir.path(), Layout::lsrw, Split::train).pairs.size() == 1);
  CHECK(load_manifest(dir.path(), Layout::lsrw, Split::test).pairs[0].id == "y");

  TempDir flat("generic_flat");
  write_small(flat / "LOW/a.png", 5);
  write_small(flat / "High/a.png", 6);
  const auto g = load_manifest(flat.path(), Layout::generic_paired, Split::test);
  CHECK(g.pairs.size() == 1);

  TempDir split("generic_split");
  write_small(split / "train/low/a.png", 7);
  write_small(split / "train/high/a.png", 8);
  write_small(split / "test/low/b.png", 9);
  write_small(split / "test/high/b.png", 10);
  CHECK(load_manifest(split.path(), Layout::generic_paired, Split::test).pairs[0].id == "b");
}

TEST_CASE("manifest errors") {
  SUBCASE("orphan names the file") {
    TempDir dir("orphan");
    write_small(dir / "low/a.png", 1);
    write_small(dir / "high/a.png", 2);
    write_small(dir / "low/lonely.png", 3);
    try {
      load_manifest(dir.path(), Layout::generic_paired, Split::train);
      FAIL("expected a pairing error");
    } catch (const PairingError& e) {
      CHECK(std::string(e.what()).find("lonely.png") != std::string::npos);
    }
  }
  SUBCASE("orphan ground truth") {
    TempDir dir("orphan_gt");
    write_small(dir / "low/a.png", 1);
    write_small(dir / "high/a.png", 2);
    write_small(dir / "high/b.png", 3);
    CHECK_THROWS_AS(load_manifest(dir.path(), Layout::generic_paired, Split::train), PairingError);
  }
  SUBCASE("dimension mismatch") {
    TempDir dir("mismatch");
    write_small(dir / "low/a.png", 1, 4, 5);
    write_small(dir / "high/a.png", 2, 5, 4);
    CHECK_THROWS_AS(load_manifest(dir.path(), Layout::generic_paired, Split::train), IntegrityError);
  }
  SUBCASE("empty directories") {
    TempDir dir("empty");
    fs::create_directories(dir / "low");
    fs::create_directories(dir / "high");
    CHECK_THROWS_AS(load_manifest(dir.path(), Layout::generic_paired, Split::train), PairingError);
  }
  SUBCASE("missing directories") {
    TempDir dir("missing");
    CHECK_THROWS_AS(load_manifest(dir.path(), Layout::lol_v1, Split::train), DataError);
    CHECK_THROWS_AS(load_manifest(dir / "nope", Layout::lol_v1, Split::train), DataError);
  }
}

TEST_CASE("manifest JSON round trip") {
  DatasetManifest m{"generic_paired:x", Split::test, {{"a", "/d/low/a.png", "/d/high/a.png"}}};
  const auto j = m.to_json();
  CHECK(j.at("split") == "test");
  CHECK(j.at("pairs")[0].at("low_path") == "/d/low/a.png");
  CHECK(DatasetManifest::from_json(nlohmann::json::parse(j.dump())) == m);
}

TEST_CASE("decoding hand-written PNGs") {
  TempDir dir("decode");
  SUBCASE("2x2 RGB with known bytes") {
    const std::vector<std::uint8_t> px{0, 0, 0, 255, 255, 255, 255, 0, 0, 10, 20, 30};
    write_png_bytes(dir / "rgb.png", 2, 2, 2, 8, px);
    const auto t = decode_image(dir / "rgb.png");
    REQUIRE(t.shape() == Shape{1, 3, 2, 2});
    for (Index y = 0; y < 2; ++y)
      for (Index x = 0; x < 2; ++x)
        for (Index c = 0; c < 3; ++c) CHECK(t(0, c, y, x) == float(px[std::size_t((y * 2 + x) * 3 + c)]) / 255.0f);
    CHECK(t(0, 0, 0, 1) == 1.0f);
    CHECK(t(0, 0, 0, 0) == 0.0f);
    CHECK(image_dimensions(dir / "rgb.png") == std::pair<Index, Index>{2, 2});
  }
  SUBCASE("grayscale is replicated") {
    write_png_bytes(dir / "gray.png", 3, 1, 0, 8, {7, 128, 250});
    const auto t = decode_image(dir / "gray.png");
    REQUIRE(t.shape() == Shape{1, 3, 1, 3});
    for (Index c = 0; c < 3; ++c) CHECK(t(0, c, 0, 1) == 128.0f / 255.0f);
  }
  SUBCASE("alpha is dropped") {
    write_png_bytes(dir / "rgba.png", 1, 1, 6, 8, {1, 2, 3, 4});
    const auto t = decode_image(dir / "rgba.png");
    CHECK(t.shape() == Shape{1, 3, 1, 1});
    CHECK(t(0, 2, 0, 0) == 3.0f / 255.0f);
  }
  SUBCASE("16-bit and corrupt files are rejected") {
    write_png_bytes(dir / "deep.png", 1, 1, 2, 16, {0, 1, 0, 2, 0, 3});
    CHECK_THROWS_AS(decode_image(dir / "deep.png"), DecodeError);
    std::ofstream(dir / "bad.png") << "not an image";
    CHECK_THROWS_AS(decode_image(dir / "bad.png"), DecodeError);
    CHECK_THROWS_AS(decode_image(dir / "absent.png"), DecodeError);
  }
  SUBCASE("encode then decode is exact on the 8-bit grid") {
    Tensor<float> t(Shape{1, 3, 5, 7});
    for (Index i = 0; i < t.size(); ++i) t[i] = float(i % 256) / 255.0f;
    encode_png(t, dir / "rt.png");
    CHECK(bit_equal(decode_image(dir / "rt.png"), t));
  }
}

TEST_CASE("dihedral group") {
  const auto all = Dihedral::all();
  CHECK(all.size() == 8);
  for (const auto& a : all) {
    CHECK(a * a.inverse() == Dihedral{});
    CHECK(a.inverse() * a == Dihedral{});
    for (const auto& b : all) CHECK(std::find(all.begin(), all.end(), a * b) != all.end());
  }
  CHECK(Dihedral::vflip() == Dihedral::rotation(2) * Dihedral::hflip());
  CHECK(Dihedral::rotation(4) == Dihedral{});

  const auto x = pattern(3, 4);
  SUBCASE("quarter turn is counter-clockwise") {
    const auto r = apply(Dihedral::rotation(1), x);
    REQUIRE(r.shape() == Shape{1, 3, 4, 3});
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 3; ++j) CHECK(r(0, c, i, j) == x(0, c, j, 3 - i));
  }
  SUBCASE("horizontal and vertical flips") {
    const auto h = apply(Dihedral::hflip(), x);
    const auto v = apply(Dihedral::vflip(), x);
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 4; ++j) {
        CHECK(h(0, 1, i, j) == x(0, 1, i, 3 - j));
        CHECK(v(0, 1, i, j) == x(0, 1, 2 - i, j));
      }
  }
  SUBCASE("composition and inverse act on arrays") {
    for (const auto& a : all) {
      CHECK(bit_equal(apply(a.inverse(), apply(a, x)), x));
      for (const auto& b : all) CHECK(bit_equal(apply(a * b, x), apply(a, apply(b, x))));
    }
  }
}

TEST_CASE("augmentation spec") {
  AugmentSpec spec;
  spec.validate();
  Rng rng(1);
  std::set<std::pair<int, bool>> seen;
  for (int i = 0; i < 400; ++i) {
    const auto d = spec.sample(rng);
    seen.insert({d.rot, d.flip});
  }
  CHECK(seen.size() == 8);

  AugmentSpec none{{0}, false, false};
  for (int i = 0; i < 20; ++i) CHECK(none.sample(rng) == Dihedral{});
  AugmentSpec bad{{45}, true, true};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training patches") {
  ImagePair full{random_tensor<float>(Shape{1, 3, 20, 24}, 1, 0.0, 1.0), {}};
  full.gt = full.low;
  full.gt.vec() = 1.0f - full.low.vec().array();
  const AugmentSpec aug;

  SUBCASE("same rng state gives bit-identical pairs") {
    Rng a(5), b(5);
    const auto p = sample_training_patch(full, 8, PatchMode::crop, aug, a);
    const auto q = sample_training_patch(full, 8, PatchMode::crop, aug, b);
    CHECK(bit_equal(p.low, q.low));
    CHECK(bit_equal(p.gt, q.gt));
  }
  SUBCASE("low and gt are transformed jointly") {
    Rng rng(6);
    for (int i = 0; i < 30; ++i) {
      const auto p = sample_training_patch(full, 8, PatchMode::crop, aug, rng);
      CHECK(p.low.shape() == Shape{1, 3, 8, 8});
      Tensor<float> expect = p.low;
      expect.vec() = 1.0f - p.low.vec().array();
      CHECK(bit_equal(p.gt, expect));
    }
  }
  SUBCASE("identity augmentation yields a plain crop; inverse restores alignment") {
    const AugmentSpec none{{0}, false, false};
    for (std::uint64_t s = 0; s < 20; ++s) {
      Rng a(100 + s), b(100 + s);
      const auto plain = sample_training_patch(full, 8, PatchMode::crop, none, a);
      const auto aug_p = sample_training_patch(full, 8, PatchMode::crop, aug, b);
      bool is_window = false;
      for (Index y0 = 0; y0 + 8 <= 20 && !is_window; ++y0)
        for (Index x0 = 0; x0 + 8 <= 24 && !is_window; ++x0) {
          bool eq = true;
          for (Index c = 0; c < 3 && eq; ++c)
            for (Index y = 0; y < 8 && eq; ++y)
              for (Index x = 0; x < 8 && eq; ++x) eq = plain.low(0, c, y, x) == full.low(0, c, y0 + y, x0 + x);
          is_window = eq;
        }
      CHECK(is_window);
      bool recovered = false;
      for (const auto& d : Dihedral::all()) {
        if (bit_equal(apply(d.inverse(), aug_p.gt), plain.gt)) recovered = true;
      }
      CHECK(recovered);
    }
  }
  SUBCASE("resize mode and errors") {
    Rng rng(7);
    const auto p = sample_training_patch(full, 32, PatchMode::resize, aug, rng);
    CHECK(p.low.shape() == Shape{1, 3, 32, 32});
    CHECK((p.low.array() >= 0.0f).all());
    CHECK_THROWS_AS(sample_training_patch(full, 21, PatchMode::crop, aug, rng), InputTooSmallError);
    CHECK_NOTHROW(sample_training_patch(full, 20, PatchMode::crop, aug, rng));
  }
}

TEST_CASE("eval pairs and cache") {
  TempDir dir("evalpair");
  write_small(dir / "test/low/b.png", 1, 6, 7);
  write_small(dir / "test/high/b.png", 2, 6, 7);
  write_small(dir / "test/low/a.png", 3, 5, 9);
  write_small(dir / "test/high/a.png", 4, 5, 9);
  const auto m = load_manifest(dir.path(), Layout::generic_paired, Split::test);
  REQUIRE(m.pairs.size() == 2);
  CHECK(m.pairs[0].id == "a");
  const auto p = eval_pair(m, 0);
  CHECK(p.low.shape() == Shape{1, 3, 5, 9});
  CHECK(p.low.shape() == p.gt.shape());
  CHECK(bit_equal(eval_pair(m, 0).low, p.low));
  CHECK_THROWS_AS(eval_pair(m, 2), std::out_of_range);

  const PairCache cache(m);
  CHECK(cache.size() == 2);
  CHECK(bit_equal(cache.get(1).gt, eval_pair(m, 1).gt));
  CHECK(bit_equal(cache.get(1).gt, cache.get(1).gt));
  CHECK_THROWS_AS(cache.get(5), std::out_of_range);

  Rng a(9), b(9);
  CHECK(bit_equal(sample_training_patch(m, 1, 4, PatchMode::crop, AugmentSpec{}, a).low,
                  sample_training_patch(cache.get(1), 4, PatchMode::crop, AugmentSpec{}, b).low));
}
