// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "gmmoe/ops.hpp"

namespace gmmoe {
namespace {

template <typename Scalar>
void check_same(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  if (a.empty()) throw ShapeError(std::string(op) + ": empty input");
}

// Separable "valid" filtering of one plane (h x w) with the SSIM taps.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& plane, const std::vector<double>& taps) {
  const Index k = static_cast<Index>(taps.size());
  const Index oh = plane.rows() - k + 1, ow = plane.cols() - k + 1;
  Eigen::MatrixXd rows(oh, plane.cols());
  for (Index i = 0; i < oh; ++i) {
    rows.row(i).setZero();
    for (Index t = 0; t < k; ++t) rows.row(i) += taps[t] * plane.row(i + t);
  }
  Eigen::MatrixXd out(oh, ow);
  for (Index j = 0; j < ow; ++j) {
    out.col(j).setZero();
    for (Index t = 0; t < k; ++t) out.col(j) += taps[t] * rows.col(j + t);
  }
  return out;
}

}  // namespace

template <typename Scalar>
std::vector<double> mse(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt) {
  check_same(pred, gt, "mse");
  const Shape s = pred.shape();
  const Index per_sample = s.c * s.plane();
  std::vector<double> out(static_cast<std::size_t>(s.n));
  for (Index n = 0; n < s.n; ++n) {
    double acc = 0.0;
    const Scalar* a = pred.sample(n);
    const Scalar* b = gt.sample(n);
    for (Index i = 0; i < per_sample; ++i) {
      const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      acc += d * d;
    }
    out[n] = acc / static_cast<double>(per_sample);
  }
  return out;
}

template <typename Scalar>
Var<Scalar> psnr_loss(const Var<Scalar>& pred, const Tensor<Scalar>& gt, double eps) {
  const std::vector<double> errors = mse(pred.value(), gt);
  const double batch = static_cast<double>(errors.size());
  double loss = 0.0;
  for (double e : errors) loss += 10.0 * std::log10(e + eps);
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out[0] = static_cast<Scalar>(loss / batch);
  return make_result<Scalar>(std::move(out), {pred, constant(gt)}, [errors, eps, batch](Node<Scalar>& node) {
    auto* dp = node.input_grad(0);
    if (!dp) return;
    const Tensor<Scalar>& p = node.input_value(0);
    const Tensor<Scalar>& g = node.input_value(1);
    const Shape s = p.shape();
    const Index per_sample = s.c * s.plane();
    for (Index n = 0; n < s.n; ++n) {
      // d/dp of (10/ln10) ln(mean((p-g)^2) + eps)
      const double coeff = static_cast<double>(node.grad[0]) * 10.0 / std::log(10.0) /
                           (errors[n] + eps) * 2.0 / static_cast<double>(per_sample) / batch;
      Scalar* d = dp->sample(n);
      const Scalar* a = p.sample(n);
      const Scalar* b = g.sample(n);
      for (Index i = 0; i < per_sample; ++i) d[i] += static_cast<Scalar>(coeff * (double(a[i]) - double(b[i])));
    }
  });
}

template <typename Scalar>
double psnr_loss_value(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, double eps) {
  const std::vector<double> errors = mse(pred, gt);
  double loss = 0.0;
  for (double e : errors) loss += 10.0 * std::log10(e + eps);
  return loss / static_cast<double>(errors.size());
}

template <typename Scalar>
std::vector<double> psnr_metric(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, double max_val) {
  if (!(max_val > 0.0)) throw ConfigError("psnr_metric: max_val must be positive");
  std::vector<double> out = mse(pred, gt);
  for (double& e : out) e = e > 0.0 ? std::min(kPsnrCapDb, 10.0 * std::log10(max_val * max_val / e)) : kPsnrCapDb;
  return out;
}

std::vector<double> ssim_gaussian_taps() {
  std::vector<double> taps(kSsimWindow);
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    taps[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += taps[i];
  }
  for (double& t : taps) t /= total;
  return taps;
}

template <typename Scalar>
std::vector<double> ssim_metric(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt) {
  check_same(pred, gt, "ssim_metric");
  const Shape s = pred.shape();
  if (s.h < kSsimWindow || s.w < kSsimWindow) {
    throw InputTooSmallError("ssim_metric: image " + s.str() + " smaller than the 11x11 window");
  }
  const std::vector<double> taps = ssim_gaussian_taps();
  const double c1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
  const double c2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);
  std::vector<double> out(static_cast<std::size_t>(s.n));
  for (Index n = 0; n < s.n; ++n) {
    double total = 0.0;
    for (Index c = 0; c < s.c; ++c) {
      // Planes are row-major h x w; map as w x h column-major and transpose.
      using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
      const Eigen::MatrixXd x = Eigen::Map<const RowMajor>(pred.plane(n, c), s.h, s.w).template cast<double>();
      const Eigen::MatrixXd y = Eigen::Map<const RowMajor>(gt.plane(n, c), s.h, s.w).template cast<double>();
      const Eigen::ArrayXXd mx = filter_valid(x, taps).array();
      const Eigen::ArrayXXd my = filter_valid(y, taps).array();
      const Eigen::ArrayXXd sxx = filter_valid(x.cwiseProduct(x), taps).array() - mx * mx;
      const Eigen::ArrayXXd syy = filter_valid(y.cwiseProduct(y), taps).array() - my * my;
      const Eigen::ArrayXXd sxy = filter_valid(x.cwiseProduct(y), taps).array() - mx * my;
      const Eigen::ArrayXXd map =
          ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
      total += map.mean();
    }
    out[n] = total / static_cast<double>(s.c);
  }
  return out;
}

void MetricReport::add(ImageScore score) {
  per_image.push_back(std::move(score));
  count = per_image.size();
  double p = 0.0, q = 0.0;
  for (const auto& s : per_image) {
    p += s.psnr_db;
    q += s.ssim;
  }
  mean_psnr_db = p / static_cast<double>(count);
  mean_ssim = q / static_cast<double>(count);
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["per_image"] = nlohmann::ordered_json::array();
  for (const auto& s : per_image) {
    j["per_image"].push_back({{"id", s.id}, {"psnr_db", s.psnr_db}, {"ssim", s.ssim}});
  }
  j["aggregate"] = {{"mean_psnr_db", mean_psnr_db}, {"mean_ssim", mean_ssim}, {"count", count}};
  j["config_digest"] = config_digest;
  return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  for (const auto& s : j.at("per_image")) {
    r.per_image.push_back({s.at("id").get<std::string>(), s.at("psnr_db").get<double>(), s.at("ssim").get<double>()});
  }
  const auto& agg = j.at("aggregate");
  r.mean_psnr_db = agg.at("mean_psnr_db").get<double>();
  r.mean_ssim = agg.at("mean_ssim").get<double>();
  r.count = agg.at("count").get<std::size_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  return r;
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "id,psnr_db,ssim\n" << std::setprecision(17);
  for (const auto& s : per_image) os << s.id << ',' << s.psnr_db << ',' << s.ssim << '\n';
  return os.str();
}

#define GMMOE_INSTANTIATE_METRICS(S)                                                   \
  template std::vector<double> mse(const Tensor<S>&, const Tensor<S>&);                \
  template Var<S> psnr_loss(const Var<S>&, const Tensor<S>&, double);                  \
  template double psnr_loss_value(const Tensor<S>&, const Tensor<S>&, double);         \
  template std::vector<double> psnr_metric(const Tensor<S>&, const Tensor<S>&, double); \
  template std::vector<double> ssim_metric(const Tensor<S>&, const Tensor<S>&);

GMMOE_INSTANTIATE_METRICS(float)
GMMOE_INSTANTIATE_METRICS(double)

}  // namespace gmmoe
