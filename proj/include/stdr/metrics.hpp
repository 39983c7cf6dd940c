#pragma once

#include <cmath>
#include <limits>

#include "stdr/image.hpp"

namespace stdr {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

struct LossValue {
  double value = 0.0;
  Image grad;  // d value / d pred
};

// Mean absolute error over all pixels and channels; ties get subgradient 0.
inline LossValue l1_loss(const Image& pred, const Image& gt) {
  require(same_shape(pred, gt) && pred.width > 0, "l1 loss: image shape mismatch");
  const double scale = 1.0 / (3.0 * pred.pixels());
  LossValue out;
  out.grad.resize(pred.width, pred.height);
  double acc = 0.0;
  for (int c = 0; c < 3; ++c) {
    const MatX diff = pred.channel[c] - gt.channel[c];
    acc += diff.cwiseAbs().sum();
    out.grad.channel[c] = diff.unaryExpr([](double d) { return double((d > 0) - (d < 0)); }) * scale;
  }
  out.value = acc * scale;
  return out;
}

namespace detail {

inline VecX ssim_kernel() {
  VecX k(kSsimWindow);
  const int half = kSsimWindow / 2;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - half;
    k[i] = std::exp(-0.5 * d * d / (kSsimSigma * kSsimSigma));
  }
  return k / k.sum();
}

// valid cross-correlation along x then y with the same 1D kernel
inline MatX window_filter(const MatX& img, const VecX& k) {
  const Eigen::Index h = img.rows(), w = img.cols(), n = k.size();
  MatX tmp = MatX::Zero(h, w - n + 1);
  for (Eigen::Index j = 0; j < tmp.cols(); ++j)
    for (Eigen::Index u = 0; u < n; ++u) tmp.col(j) += k[u] * img.col(j + u);
  MatX out = MatX::Zero(h - n + 1, tmp.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index u = 0; u < n; ++u) out.row(i) += k[u] * tmp.row(i + u);
  return out;
}

// adjoint of window_filter: scatter a coefficient map back to image size
inline MatX window_filter_adjoint(const MatX& coeff, const VecX& k, Eigen::Index h,
                                  Eigen::Index w) {
  const Eigen::Index n = k.size();
  MatX tmp = MatX::Zero(h, coeff.cols());
  for (Eigen::Index i = 0; i < coeff.rows(); ++i)
    for (Eigen::Index u = 0; u < n; ++u) tmp.row(i + u) += k[u] * coeff.row(i);
  MatX out = MatX::Zero(h, w);
  for (Eigen::Index j = 0; j < coeff.cols(); ++j)
    for (Eigen::Index u = 0; u < n; ++u) out.col(j + u) += k[u] * tmp.col(j);
  return out;
}

struct SsimResult {
  double mean = 0.0;
  Image grad;  // d mean / d pred, filled only when requested
};

inline SsimResult ssim_impl(const Image& pred, const Image& gt, bool want_grad) {
  require(same_shape(pred, gt), "ssim: image shape mismatch");
  require(pred.width >= kSsimWindow && pred.height >= kSsimWindow,
          "ssim: image smaller than the filter window");
  const VecX k = ssim_kernel();
  const Eigen::Index wh = pred.height - kSsimWindow + 1;
  const Eigen::Index ww = pred.width - kSsimWindow + 1;
  const double scale = 1.0 / (3.0 * wh * ww);

  SsimResult res;
  if (want_grad) res.grad.resize(pred.width, pred.height);

  for (int c = 0; c < 3; ++c) {
    const MatX& x = pred.channel[c];
    const MatX& y = gt.channel[c];
    const MatX mu_x = window_filter(x, k);
    const MatX mu_y = window_filter(y, k);
    const MatX e_xx = window_filter(x.cwiseProduct(x), k);
    const MatX e_yy = window_filter(y.cwiseProduct(y), k);
    const MatX e_xy = window_filter(x.cwiseProduct(y), k);

    MatX dmu_x, de_xx, de_xy;
    if (want_grad) {
      dmu_x.setZero(wh, ww);
      de_xx.setZero(wh, ww);
      de_xy.setZero(wh, ww);
    }
    for (Eigen::Index i = 0; i < wh; ++i) {
      for (Eigen::Index j = 0; j < ww; ++j) {
        const double mx = mu_x(i, j), my = mu_y(i, j);
        const double var_x = e_xx(i, j) - mx * mx;
        const double var_y = e_yy(i, j) - my * my;
        const double cov = e_xy(i, j) - mx * my;
        const double a1 = 2.0 * mx * my + kSsimC1;
        const double a2 = 2.0 * cov + kSsimC2;
        const double b1 = mx * mx + my * my + kSsimC1;
        const double b2 = var_x + var_y + kSsimC2;
        const double s = (a1 * a2) / (b1 * b2);
        res.mean += s * scale;
        if (want_grad) {
          dmu_x(i, j) = 2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2);
          de_xx(i, j) = -s / b2;
          de_xy(i, j) = 2.0 * a1 / (b1 * b2);
        }
      }
    }
    if (want_grad) {
      MatX g = window_filter_adjoint(dmu_x, k, pred.height, pred.width);
      g += 2.0 * x.cwiseProduct(window_filter_adjoint(de_xx, k, pred.height, pred.width));
      g += y.cwiseProduct(window_filter_adjoint(de_xy, k, pred.height, pred.width));
      res.grad.channel[c] = g * scale;
    }
  }
  return res;
}

}  // namespace detail

inline double ssim(const Image& pred, const Image& gt) {
  return detail::ssim_impl(pred, gt, false).mean;
}

// Structural dissimilarity (1 - ssim) / 2 with its exact gradient.
inline LossValue dssim_loss(const Image& pred, const Image& gt) {
  detail::SsimResult s = detail::ssim_impl(pred, gt, true);
  LossValue out;
  out.value = (1.0 - s.mean) / 2.0;
  out.grad = std::move(s.grad);
  for (auto& c : out.grad.channel) c *= -0.5;
  return out;
}

// 10 log10(1 / MSE) against peak 1; identical images report +infinity.
inline double psnr(const Image& pred, const Image& gt) {
  require(same_shape(pred, gt) && pred.width > 0, "psnr: image shape mismatch");
  double mse = 0.0;
  for (int c = 0; c < 3; ++c) mse += (pred.channel[c] - gt.channel[c]).cwiseAbs2().sum();
  mse /= 3.0 * pred.pixels();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

}  // namespace stdr
