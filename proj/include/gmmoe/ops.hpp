// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "gmmoe/autograd.hpp"

namespace gmmoe {

// Differentiable free functions over NCHW Vars. Every op checks its shape
// contract and throws ShapeError (or InputTooSmallError) on violation.

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  Index dilation = 1;
  Index groups = 1;
};

// weight: (Cout, Cin / groups, kh, kw); bias: (1, Cout, 1, 1) or undefined.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   const Conv2dOptions& opts = {});

// Broadcasting elementwise ops: each dimension of the two operands is equal
// or 1 in one of them.
template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor);

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x);
// Gradient passes where lo <= x <= hi.
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& x, Scalar lo, Scalar hi);

template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> parts);
template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& x, Index begin, Index count);

// (B, C, H, W) -> (B, C, 1, 1)
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> global_max_pool(const Var<Scalar>& x);
// (B, C, H, W) -> (B, 1, H, W)
template <typename Scalar>
Var<Scalar> channel_mean(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> channel_max(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& x, Index kernel, Index stride, Index padding);

/// Bilinear 2x upsampling cropped to (out_h, out_w).
///
/// Output pixel j samples the source at coordinate j / 2 with edge clamping,
/// so even outputs copy a source pixel and odd outputs are the midpoint of two
/// neighbours. The weights of every output sum to one. Requires
/// out_h <= 2H and out_w <= 2W.
template <typename Scalar>
Var<Scalar> upsample_bilinear2x(const Var<Scalar>& x, Index out_h, Index out_w);

// Space-to-depth: (B, C, H, W) -> (B, C*r*r, H/r, W/r);
// out[n, c*r*r + i*r + j, y, x] = in[n, c, y*r + i, x*r + j].
template <typename Scalar>
Var<Scalar> pixel_unshuffle(const Var<Scalar>& x, Index r);
// Exact inverse of pixel_unshuffle.
template <typename Scalar>
Var<Scalar> pixel_shuffle(const Var<Scalar>& x, Index r);

// Mirror padding at the bottom and right edges. Pads larger than the extent
// fold back and forth; a one-pixel extent replicates.
template <typename Scalar>
Var<Scalar> reflect_pad(const Var<Scalar>& x, Index pad_bottom, Index pad_right);
// Top-left window of size (h, w).
template <typename Scalar>
Var<Scalar> crop(const Var<Scalar>& x, Index h, Index w);

// Softmax over the channel axis at every (n, y, x). Channels with a false
// mask entry are excluded and get weight exactly 0. Empty mask = all enabled.
template <typename Scalar>
Var<Scalar> softmax_channels(const Var<Scalar>& x, const std::vector<bool>& mask = {});

/// Convex combination of K same-shaped inputs with per-sample weights
/// (B, K, 1, 1) that lie on the simplex.
///
/// Evaluated as x_k + sum_{i != k} w_i (x_i - x_k) with k the dominant weight,
/// which equals sum_i w_i x_i on the simplex but is exact for one-hot weights
/// and for identical inputs. The weight gradient is the simplex-tangent part.
template <typename Scalar>
Var<Scalar> convex_combine(std::span<const Var<Scalar>> inputs, const Var<Scalar>& weights);

// Sum of all entries -> (1, 1, 1, 1).
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x);
// Per-sample mean -> (B, 1, 1, 1).
template <typename Scalar>
Var<Scalar> sample_mean(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) {
  return mul(a, b);
}

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value), false);
}

// Mirror index into [0, n) for any integer i.
inline Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace gmmoe
