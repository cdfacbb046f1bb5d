// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/image.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>

namespace hyperfield {

inline constexpr double kPsnrZeroMse = 1e-12;

template <class A, class B>
double mean_squared_error(std::span<const A> y, std::span<const B> yhat) {
  if (y.size() != yhat.size()) throw std::invalid_argument("metric inputs differ in size");
  if (y.empty()) throw std::invalid_argument("metric inputs are empty");
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = static_cast<double>(y[i]) - static_cast<double>(yhat[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(y.size());
}

/// -10 log10(MSE / peak^2). Returns +inf below kPsnrZeroMse.
inline double psnr_from_mse(double mse, double peak = 1.0) {
  if (mse < kPsnrZeroMse) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse / (peak * peak));
}

template <class A, class B>
double psnr(std::span<const A> y, std::span<const B> yhat, double peak = 1.0) {
  return psnr_from_mse(mean_squared_error(y, yhat), peak);
}

inline double psnr(const Image& y, const Image& yhat) {
  return psnr(std::span<const float>(y.pixels), std::span<const float>(yhat.pixels));
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Mean SSIM over all valid Gaussian windows, averaged across channels.
double ssim(const Image& y, const Image& yhat, const SsimOptions& options = {});

}  // namespace hyperfield
