// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>

#include "gmmoe/errors.hpp"

namespace gmmoe {

using Index = Eigen::Index;

// NCHW extent of a rank-4 array.
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index numel() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

inline std::string Shape::str() const {
  return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
         std::to_string(w) + ")";
}

/// Dense rank-4 array in NCHW order, contiguous, backed by an Eigen vector.
///
/// Channel planes are contiguous, so a sample's channels map to a column-major
/// (H*W) x C matrix without copying; the convolution kernels rely on that.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using PlaneMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(shape), data_(Storage::Zero(shape.numel())) {}
  Tensor(Shape shape, Scalar fill) : shape_(shape), data_(Storage::Constant(shape.numel(), fill)) {}

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor constant(Shape shape, Scalar v) { return Tensor(shape, v); }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> span() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> span() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Storage& vec() { return data_; }
  const Storage& vec() const { return data_; }
  auto array() { return data_.array(); }
  auto array() const { return data_.array(); }

  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar* sample(Index n) { return data() + n * shape_.c * shape_.plane(); }
  const Scalar* sample(Index n) const { return data() + n * shape_.c * shape_.plane(); }
  Scalar* plane(Index n, Index c) { return sample(n) + c * shape_.plane(); }
  const Scalar* plane(Index n, Index c) const { return sample(n) + c * shape_.plane(); }

  // Channels [c0, c0 + count) of sample n as a (H*W) x count column-major view.
  Eigen::Map<PlaneMatrix> planes(Index n, Index c0, Index count) {
    return {plane(n, c0), shape_.plane(), count};
  }
  Eigen::Map<const PlaneMatrix> planes(Index n, Index c0, Index count) const {
    return {plane(n, c0), shape_.plane(), count};
  }

  void set_zero() { data_.setZero(); }
  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.vec() = data_.template cast<Other>();
    return out;
  }

 private:
  Shape shape_;
  Storage data_;
};

using ImageBatch = Tensor<float>;

}  // namespace gmmoe
