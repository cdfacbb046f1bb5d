// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/metrics.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace hyperfield {

namespace {

using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Plane channel_plane(const Image& img, Index c) {
  Plane p(img.height, img.width);
  for (Index y = 0; y < img.height; ++y) {
    for (Index x = 0; x < img.width; ++x) p(y, x) = img.at(y, x, c);
  }
  return p;
}

// Valid-mode separable filtering with a normalized 1-D kernel.
Plane filter_valid(const Plane& in, const std::vector<double>& k) {
  const auto n = static_cast<Index>(k.size());
  Plane rows(in.rows(), in.cols() - n + 1);
  for (Index y = 0; y < in.rows(); ++y) {
    for (Index x = 0; x < rows.cols(); ++x) {
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * in(y, x + i);
      rows(y, x) = acc;
    }
  }
  Plane out(in.rows() - n + 1, rows.cols());
  for (Index y = 0; y < out.rows(); ++y) {
    for (Index x = 0; x < out.cols(); ++x) {
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * rows(y + i, x);
      out(y, x) = acc;
    }
  }
  return out;
}

}  // namespace

double ssim(const Image& y, const Image& yhat, const SsimOptions& o) {
  if (y.height != yhat.height || y.width != yhat.width || y.channels != yhat.channels) {
    throw std::invalid_argument("ssim inputs differ in shape");
  }
  if (o.window < 1 || y.height < o.window || y.width < o.window) {
    throw std::invalid_argument("image smaller than the SSIM window");
  }
  std::vector<double> k(static_cast<std::size_t>(o.window));
  const double mid = 0.5 * (o.window - 1);
  double total = 0.0;
  for (int i = 0; i < o.window; ++i) {
    k[static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - mid) * (i - mid) / (o.sigma * o.sigma));
    total += k[static_cast<std::size_t>(i)];
  }
  for (auto& v : k) v /= total;

  const double c1 = (o.k1 * o.data_range) * (o.k1 * o.data_range);
  const double c2 = (o.k2 * o.data_range) * (o.k2 * o.data_range);
  double acc = 0.0;
  for (Index c = 0; c < y.channels; ++c) {
    const Plane a = channel_plane(y, c);
    const Plane b = channel_plane(yhat, c);
    const Plane mu_a = filter_valid(a, k);
    const Plane mu_b = filter_valid(b, k);
    const Plane var_a = filter_valid(a * a, k) - mu_a * mu_a;
    const Plane var_b = filter_valid(b * b, k) - mu_b * mu_b;
    const Plane cov = filter_valid(a * b, k) - mu_a * mu_b;
    const Plane map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                      ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    acc += map.mean();
  }
  return acc / static_cast<double>(y.channels);
}

}  // namespace hyperfield
