// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/inr.hpp"
#include "hyperfield/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

namespace hyperfield {

// Camera-to-world pinhole camera; the camera looks down its local -z axis.
struct Camera {
  Eigen::Matrix4d pose = Eigen::Matrix4d::Identity();
  double focal = 1.0;  // pixels
  Index width = 0;
  Index height = 0;
};

struct RayBatch {
  RowMatrix<double> origins;     // [n x 3]
  RowMatrix<double> directions;  // [n x 3], unit norm
  double near = 0.5;
  double far = 3.5;

  Index size() const { return origins.rows(); }
};

/// Rays through pixels given as linear indices v * width + u. Pixel (u, v)
/// maps to R * [(u - W/2) / f, -(v - H/2) / f, -1], normalized.
inline RayBatch make_rays(const Camera& cam, const std::vector<Index>& pixels, double near, double far) {
  if (cam.focal <= 0.0) throw std::invalid_argument("focal length must be positive");
  if (!(near < far)) throw std::invalid_argument("near must be less than far");
  RayBatch rays;
  rays.near = near;
  rays.far = far;
  const auto n = static_cast<Index>(pixels.size());
  rays.origins.resize(n, 3);
  rays.directions.resize(n, 3);
  const Eigen::Matrix3d rot = cam.pose.topLeftCorner<3, 3>();
  const Eigen::Vector3d origin = cam.pose.topRightCorner<3, 1>();
  for (Index i = 0; i < n; ++i) {
    const Index u = pixels[static_cast<std::size_t>(i)] % cam.width;
    const Index v = pixels[static_cast<std::size_t>(i)] / cam.width;
    const Eigen::Vector3d local((static_cast<double>(u) - 0.5 * static_cast<double>(cam.width)) / cam.focal,
                                -(static_cast<double>(v) - 0.5 * static_cast<double>(cam.height)) / cam.focal, -1.0);
    rays.origins.row(i) = origin.transpose();
    rays.directions.row(i) = (rot * local).normalized().transpose();
  }
  return rays;
}

inline std::vector<Index> all_pixels(const Camera& cam) {
  std::vector<Index> p(static_cast<std::size_t>(cam.width * cam.height));
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<Index>(i);
  return p;
}

/// Sample depths [n x S]: bin midpoints, or uniform jitter within each bin.
inline RowMatrix<double> sample_depths(const RayBatch& rays, Index n_samples, std::mt19937_64* jitter) {
  if (n_samples < 2) throw std::invalid_argument("need at least two samples per ray");
  const double bin = (rays.far - rays.near) / static_cast<double>(n_samples);
  RowMatrix<double> t(rays.size(), n_samples);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (Index r = 0; r < rays.size(); ++r) {
    for (Index s = 0; s < n_samples; ++s) {
      const double off = jitter != nullptr ? u01(*jitter) : 0.5;
      t(r, s) = rays.near + (static_cast<double>(s) + off) * bin;
    }
  }
  return t;
}

/// delta_i = t_{i+1} - t_i, with the last interval running to `far`.
inline RowMatrix<double> sample_deltas(const RowMatrix<double>& t, double far) {
  RowMatrix<double> d(t.rows(), t.cols());
  for (Index r = 0; r < t.rows(); ++r) {
    for (Index s = 0; s + 1 < t.cols(); ++s) d(r, s) = t(r, s + 1) - t(r, s);
    d(r, t.cols() - 1) = far - t(r, t.cols() - 1);
  }
  return d;
}

inline constexpr double kMaxOpticalDepth = 50.0;

template <class S>
struct Compositing {
  Tensor<S> weights;             // T_i * alpha_i, [n x S]
  Tensor<S> final_transmittance; // T after the last sample, [n x 1]
};

/// alpha_i = 1 - exp(-sigma_i delta_i), T_i = prod_{j<i} (1 - alpha_j).
template <class S>
Compositing<S> compositing_weights(const Tensor<S>& sigma, const Tensor<S>& deltas) {
  Tensor<S> depth = clamp(mul(sigma, deltas), std::numeric_limits<S>::lowest(), static_cast<S>(kMaxOpticalDepth));
  Tensor<S> alpha = add_scalar(scale(exp(scale(depth, S(-1))), S(-1)), S(1));
  Tensor<S> trans = exp(scale(cumsum_exclusive(depth, 1), S(-1)));
  return {mul(trans, alpha), exp(scale(sum(depth, 1), S(-1)))};
}

/// Weighted sum of one per-sample channel [n x S] plus background.
template <class S>
Tensor<S> composite_channel(const Tensor<S>& channel, const Compositing<S>& c, double background) {
  Tensor<S> acc = sum(mul(channel, c.weights), 1);
  if (background == 0.0) return acc;
  return add(acc, scale(c.final_transmittance, static_cast<S>(background)));
}

template <class S>
struct RenderResult {
  Tensor<S> rgb;                     // [n x 3]
  std::optional<Tensor<S>> logvar;   // [n x 3] for probabilistic heads
  Compositing<S> compositing;
};

/// Volume-renders `rays` through a radiance INR.
template <class S>
RenderResult<S> render_rays(const Inr<S>& inr, const RayBatch& rays, Index n_samples, bool white_bg,
                            std::mt19937_64* jitter = nullptr) {
  const auto transform = inr.arch().transform;
  if (transform != OutputTransform::radiance && transform != OutputTransform::radiance_np) {
    throw std::invalid_argument("render_rays needs a radiance INR");
  }
  const Index n = rays.size();
  const RowMatrix<double> t = sample_depths(rays, n_samples, jitter);
  const RowMatrix<double> dt = sample_deltas(t, rays.far);
  Tensor<S> points({n * n_samples, 3});
  for (Index r = 0; r < n; ++r) {
    for (Index s = 0; s < n_samples; ++s) {
      for (Index a = 0; a < 3; ++a) {
        points.data()[(r * n_samples + s) * 3 + a] =
            static_cast<S>(rays.origins(r, a) + t(r, s) * rays.directions(r, a));
      }
    }
  }
  Tensor<S> deltas = Tensor<S>::from_matrix(dt);
  Tensor<S> out = inr.evaluate(points);
  const Index c = out.dim(1);
  auto channel = [&](Index k) { return reshape(slice(out, 1, k, 1), {n, n_samples}); };

  RenderResult<S> res;
  res.compositing = compositing_weights(channel(c - 1), deltas);
  const double bg = white_bg ? 1.0 : 0.0;
  std::vector<Tensor<S>> rgb;
  for (Index k = 0; k < 3; ++k) rgb.push_back(composite_channel(channel(k), res.compositing, bg));
  res.rgb = concat(rgb, 1);
  if (transform == OutputTransform::radiance_np) {
    // Mixture variance along the ray; the background contributes exp(min logvar).
    std::vector<Tensor<S>> lv;
    for (Index k = 0; k < 3; ++k) {
      Tensor<S> var = composite_channel(exp(channel(3 + k)), res.compositing, std::exp(kLogvarMin));
      lv.push_back(log(var));
    }
    res.logvar = concat(lv, 1);
  }
  return res;
}

/// Identity forward map for direct-coordinate signals (audio, images).
template <class S>
Tensor<S> sample_signal(const Inr<S>& inr, const Tensor<S>& coords) {
  return inr.evaluate(coords);
}

/// n evenly spaced coordinates in [-1, 1], as [n x 1].
template <class S>
Tensor<S> signal_coords(Index n) {
  Tensor<S> c({n, 1});
  for (Index i = 0; i < n; ++i) {
    c.data()[i] = n == 1 ? S(0) : static_cast<S>(-1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  return c;
}

/// Pixel-center coordinates in [-1, 1]^2 as [(H*W) x 2], (x, y) per row.
template <class S>
Tensor<S> image_coords(Index height, Index width) {
  Tensor<S> c({height * width, 2});
  for (Index v = 0; v < height; ++v) {
    for (Index u = 0; u < width; ++u) {
      c.data()[(v * width + u) * 2] = static_cast<S>(-1.0 + (2.0 * static_cast<double>(u) + 1.0) / static_cast<double>(width));
      c.data()[(v * width + u) * 2 + 1] =
          static_cast<S>(-1.0 + (2.0 * static_cast<double>(v) + 1.0) / static_cast<double>(height));
    }
  }
  return c;
}

template <class S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss shape mismatch " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  }
  Tensor<S> diff = sub(pred, target);
  return mean(mul(diff, diff));
}

template <class S>
struct NpPrediction {
  Tensor<S> mean;
  Tensor<S> logvar;  // clamped to [-10, 10] upstream
};

/// Gaussian negative log-likelihood, mean over elements of
/// 0.5 * ((y - mu)^2 / var + logvar + log 2 pi).
template <class S>
Tensor<S> np_nll_loss(const NpPrediction<S>& pred, const Tensor<S>& target) {
  if (pred.mean.shape() != target.shape() || pred.logvar.shape() != target.shape()) {
    throw ShapeError("np_nll_loss shape mismatch");
  }
  Tensor<S> diff = sub(target, pred.mean);
  Tensor<S> quad = mul(mul(diff, diff), exp(scale(pred.logvar, S(-1))));
  const S log2pi = static_cast<S>(std::log(2.0 * std::numbers::pi));
  return scale(mean(add_scalar(add(quad, pred.logvar), log2pi)), S(0.5));
}

}  // namespace hyperfield
