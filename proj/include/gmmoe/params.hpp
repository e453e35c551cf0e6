// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <set>
#include <string>
#include <string_view>

#include "gmmoe/autograd.hpp"
#include "gmmoe/rng.hpp"

namespace gmmoe {

template <typename Scalar>
class ParamScope;

/// Ordered map from dotted hierarchical path ("enc0.block0.gate.fc1.weight")
/// to a trainable leaf. Iteration order is lexicographic by path, which fixes
/// the order of initialization digests and checkpoint records.
template <typename Scalar>
class BlockParams {
 public:
  using Map = std::map<std::string, Var<Scalar>, std::less<>>;

  // Throws ConfigError if the path is already taken.
  void add(const std::string& path, Tensor<Scalar> value);
  bool contains(std::string_view path) const { return map_.find(path) != map_.end(); }
  // Throws ConfigError naming the missing path.
  const Var<Scalar>& at(std::string_view path) const;
  Var<Scalar>& at(std::string_view path);

  std::size_t size() const { return map_.size(); }
  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }
  auto begin() { return map_.begin(); }
  auto end() { return map_.end(); }

  Index count_scalars() const;
  void zero_grad();
  // Set of every dotted path segment that appears in some path.
  std::set<std::string> segments() const;

  ParamScope<Scalar> scope(std::string prefix) const;

  // Deep copy with converted values; gradients are not copied.
  template <typename Other>
  BlockParams<Other> cast() const {
    BlockParams<Other> out;
    for (const auto& [path, var] : map_) out.add(path, var.value().template cast<Other>());
    return out;
  }

 private:
  Map map_;
};

// Read-only view of the parameters below a path prefix.
template <typename Scalar>
class ParamScope {
 public:
  ParamScope(const BlockParams<Scalar>* params, std::string prefix)
      : params_(params), prefix_(std::move(prefix)) {}

  const Var<Scalar>& operator[](std::string_view name) const { return params_->at(path(name)); }
  bool has(std::string_view name) const { return params_->contains(path(name)); }
  ParamScope sub(std::string_view name) const { return ParamScope(params_, path(name)); }
  std::string path(std::string_view name) const {
    return prefix_.empty() ? std::string(name) : prefix_ + "." + std::string(name);
  }
  const std::string& prefix() const { return prefix_; }

 private:
  const BlockParams<Scalar>* params_;
  std::string prefix_;
};

/// Registers parameters under a prefix with fan-in scaled uniform init
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn from one sequential stream.
template <typename Scalar>
class ParamBuilder {
 public:
  ParamBuilder(BlockParams<Scalar>& params, Rng& rng, std::string prefix = {})
      : params_(&params), rng_(&rng), prefix_(std::move(prefix)) {}

  ParamBuilder sub(std::string_view name) const {
    return ParamBuilder(*params_, *rng_, join(name));
  }

  // <name>.weight (cout, cin/groups, k, k) and <name>.bias (1, cout, 1, 1).
  void conv(std::string_view name, Index cin, Index cout, Index kernel, Index groups = 1,
            bool bias = true);
  // Same shapes, zero-filled (residual heads that start as identity).
  void zero_conv(std::string_view name, Index cin, Index cout, Index kernel, bool bias = true);

 private:
  std::string join(std::string_view name) const {
    return prefix_.empty() ? std::string(name) : prefix_ + "." + std::string(name);
  }

  BlockParams<Scalar>* params_;
  Rng* rng_;
  std::string prefix_;
};

// 64-bit FNV-1a over path names, shapes and raw parameter bytes, in path order.
template <typename Scalar>
std::uint64_t parameter_digest(const BlockParams<Scalar>& params);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t hash = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t v);

}  // namespace gmmoe
