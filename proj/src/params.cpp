// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/params.hpp"

#include <cmath>
#include <cstdio>

namespace gmmoe {

template <typename Scalar>
void BlockParams<Scalar>::add(const std::string& path, Tensor<Scalar> value) {
  if (contains(path)) throw ConfigError("duplicate parameter path '" + path + "'");
  map_.emplace(path, Var<Scalar>(std::move(value), true));
}

template <typename Scalar>
const Var<Scalar>& BlockParams<Scalar>::at(std::string_view path) const {
  auto it = map_.find(path);
  if (it == map_.end()) throw ConfigError("missing parameter '" + std::string(path) + "'");
  return it->second;
}

template <typename Scalar>
Var<Scalar>& BlockParams<Scalar>::at(std::string_view path) {
  auto it = map_.find(path);
  if (it == map_.end()) throw ConfigError("missing parameter '" + std::string(path) + "'");
  return it->second;
}

template <typename Scalar>
Index BlockParams<Scalar>::count_scalars() const {
  Index total = 0;
  for (const auto& [path, var] : map_) total += var.value().size();
  return total;
}

template <typename Scalar>
void BlockParams<Scalar>::zero_grad() {
  for (auto& [path, var] : map_) var.zero_grad();
}

template <typename Scalar>
std::set<std::string> BlockParams<Scalar>::segments() const {
  std::set<std::string> out;
  for (const auto& [path, var] : map_) {
    std::size_t start = 0;
    while (start <= path.size()) {
      const std::size_t dot = path.find('.', start);
      out.insert(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
  }
  return out;
}

template <typename Scalar>
ParamScope<Scalar> BlockParams<Scalar>::scope(std::string prefix) const {
  return ParamScope<Scalar>(this, std::move(prefix));
}

template <typename Scalar>
void ParamBuilder<Scalar>::conv(std::string_view name, Index cin, Index cout, Index kernel,
                                Index groups, bool bias) {
  const Index cin_g = cin / groups;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin_g * kernel * kernel));
  Tensor<Scalar> w(Shape{cout, cin_g, kernel, kernel});
  for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(uniform(*rng_, -bound, bound));
  params_->add(join(name) + ".weight", std::move(w));
  if (bias) {
    Tensor<Scalar> b(Shape{1, cout, 1, 1});
    for (Index i = 0; i < b.size(); ++i) b[i] = static_cast<Scalar>(uniform(*rng_, -bound, bound));
    params_->add(join(name) + ".bias", std::move(b));
  }
}

template <typename Scalar>
void ParamBuilder<Scalar>::zero_conv(std::string_view name, Index cin, Index cout, Index kernel, bool bias) {
  params_->add(join(name) + ".weight", Tensor<Scalar>(Shape{cout, cin, kernel, kernel}));
  if (bias) params_->add(join(name) + ".bias", Tensor<Scalar>(Shape{1, cout, 1, 1}));
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t hash) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ull;
  }
  return hash;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename Scalar>
std::uint64_t parameter_digest(const BlockParams<Scalar>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [path, var] : params) {
    h = fnv1a(path.data(), path.size(), h);
    const Shape s = var.shape();
    const std::int64_t dims[4] = {s.n, s.c, s.h, s.w};
    h = fnv1a(dims, sizeof(dims), h);
    h = fnv1a(var.value().data(), sizeof(Scalar) * static_cast<std::size_t>(var.value().size()), h);
  }
  return h;
}

template class BlockParams<float>;
template class BlockParams<double>;
template class ParamBuilder<float>;
template class ParamBuilder<double>;
template std::uint64_t parameter_digest(const BlockParams<float>&);
template std::uint64_t parameter_digest(const BlockParams<double>&);

}  // namespace gmmoe
