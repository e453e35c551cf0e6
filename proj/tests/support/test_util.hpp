// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "gmmoe/data.hpp"
#include "gmmoe/ops.hpp"
#include "gmmoe/params.hpp"
#include "gmmoe/rng.hpp"

namespace gmmoe::testing {

namespace fs = std::filesystem;

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(uniform(rng, lo, hi));
  return t;
}

template <typename Scalar>
bool bit_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape() && std::equal(a.data(), a.data() + a.size(), b.data());
}

template <typename Scalar>
double max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("gmmoe_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

// Writes a random 8-bit RGB PNG of the given size.
inline void write_random_png(const fs::path& path, Index h, Index w, std::uint64_t seed) {
  fs::create_directories(path.parent_path());
  ImageBatch img = random_tensor<float>(Shape{1, 3, h, w}, seed, 0.0, 1.0);
  encode_png(img, path);
}

// ---------------------------------------------------------------------------
// Central finite differences in double precision.

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradReport {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Compares d loss / d leaf from one backward pass with central differences
/// (step h) for every entry of every leaf. `loss` must rebuild the graph from
/// the current leaf values and return a (1, 1, 1, 1) Var. `stride` > 1
/// checks every stride-th entry of each leaf.
template <typename LossFn>
GradReport check_gradients(std::vector<std::pair<std::string, Var<double>>> leaves, LossFn&& loss,
                           double h = 1e-5, Index stride = 1) {
  for (auto& [name, v] : leaves) v.zero_grad();
  {
    const Var<double> l = loss();
    backward(l);
  }
  GradReport report;
  for (auto& [name, v] : leaves) {
    const Tensor<double> analytic = v.has_grad() ? v.grad() : Tensor<double>(v.shape());
    NoGradGuard guard;
    for (Index i = 0; i < v.value().size(); i += stride) {
      const double orig = v.value()[i];
      v.mutable_value()[i] = orig + h;
      const double fp = loss().value()[0];
      v.mutable_value()[i] = orig - h;
      const double fm = loss().value()[0];
      v.mutable_value()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic[i]) +
                       " numeric " + std::to_string(numeric);
      }
    }
  }
  return report;
}

inline std::vector<std::pair<std::string, Var<double>>> leaves_of(BlockParams<double>& params) {
  std::vector<std::pair<std::string, Var<double>>> out;
  for (auto& [path, v] : params) out.emplace_back(path, v);
  return out;
}

// Scalar probe <out, R> with a fixed random R, so every output entry matters.
inline Var<double> probe(const Var<double>& out, std::uint64_t seed = 99) {
  return sum(mul(out, constant(random_tensor<double>(out.shape(), seed))));
}

// ---------------------------------------------------------------------------
// Naive reference implementations.

inline Tensor<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                                   Index stride, Index pad, Index dil, Index groups) {
  const Shape xs = x.shape(), ws = w.shape();
  const Index oh = (xs.h + 2 * pad - dil * (ws.h - 1) - 1) / stride + 1;
  const Index ow = (xs.w + 2 * pad - dil * (ws.w - 1) - 1) / stride + 1;
  Tensor<double> out(Shape{xs.n, ws.n, oh, ow});
  const Index cin_g = xs.c / groups, cout_g = ws.n / groups;
  for (Index n = 0; n < xs.n; ++n)
    for (Index co = 0; co < ws.n; ++co) {
      const Index g = co / cout_g;
      for (Index y = 0; y < oh; ++y)
        for (Index xx = 0; xx < ow; ++xx) {
          double acc = b ? (*b)(0, co, 0, 0) : 0.0;
          for (Index ci = 0; ci < cin_g; ++ci)
            for (Index ky = 0; ky < ws.h; ++ky)
              for (Index kx = 0; kx < ws.w; ++kx) {
                const Index iy = y * stride - pad + ky * dil, ix = xx * stride - pad + kx * dil;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += w(co, ci, ky, kx) * x(n, g * cin_g + ci, iy, ix);
              }
          out(n, co, y, xx) = acc;
        }
    }
  return out;
}

}  // namespace gmmoe::testing
