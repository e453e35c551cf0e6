// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "gmmoe/autograd.hpp"

namespace gmmoe {

inline constexpr double kPsnrCapDb = 100.0;
inline constexpr double kDefaultLossEps = 1e-8;

// SSIM settings: 11x11 Gaussian window, sigma 1.5, unit dynamic range.
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

// Per-sample mean squared error over C*H*W entries.
template <typename Scalar>
std::vector<double> mse(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt);

/// Differentiable PSNR loss, averaged over the batch:
///   loss = (10 / ln 10) * ln(MSE + eps) = 10 * log10(MSE + eps),
/// i.e. the negated PSNR of a unit-range image, so minimizing it raises PSNR.
template <typename Scalar>
Var<Scalar> psnr_loss(const Var<Scalar>& pred, const Tensor<Scalar>& gt, double eps = kDefaultLossEps);

// Value-only variant of psnr_loss.
template <typename Scalar>
double psnr_loss_value(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, double eps = kDefaultLossEps);

// 10 * log10(max_val^2 / MSE) per sample, capped at kPsnrCapDb (zero MSE).
template <typename Scalar>
std::vector<double> psnr_metric(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, double max_val = 1.0);

// Mean local SSIM per sample over "valid" window positions, channels
// averaged, computed in RGB (no luma conversion). Requires H, W >= 11.
template <typename Scalar>
std::vector<double> ssim_metric(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt);

// Normalized 1-D Gaussian taps used by ssim_metric.
std::vector<double> ssim_gaussian_taps();

struct ImageScore {
  std::string id;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<ImageScore> per_image;
  double mean_psnr_db = 0.0;
  double mean_ssim = 0.0;
  std::size_t count = 0;
  std::string config_digest;

  void add(ImageScore score);
  nlohmann::ordered_json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  // Header "id,psnr_db,ssim" then one row per image.
  std::string to_csv() const;
};

}  // namespace gmmoe
