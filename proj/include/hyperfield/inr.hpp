// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/init.hpp"
#include "hyperfield/ops.hpp"

#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace hyperfield {

/// How raw INR outputs map to predicted quantities.
enum class OutputTransform {
  radiance,       // [rgb, sigma] -> [sigmoid(rgb), relu(sigma)]
  radiance_np,    // [rgb, logvar(3), sigma] -> [sigmoid(rgb), clamp(logvar), relu(sigma)]
  identity,       // signal values as-is
  identity_np,    // [mean(c), logvar(c)] -> [mean, clamp(logvar)]
};

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

struct LayerShape {
  Index out = 0;
  Index in = 0;
  Index count() const { return out * in; }
  bool operator==(const LayerShape&) const = default;
};

struct InrArchitecture {
  Index input_dim = 3;
  Index fourier_features = 20;  // encoded width is twice this
  Index hidden_width = 32;
  Index linear_layers = 3;
  Index output_dim = 4;
  OutputTransform transform = OutputTransform::radiance;

  Index encoded_dim() const { return 2 * fourier_features; }

  /// Weight shapes [out x in], input layer first.
  std::vector<LayerShape> matrices() const {
    std::vector<LayerShape> m;
    Index in = encoded_dim();
    for (Index k = 0; k < linear_layers; ++k) {
      const Index out = k + 1 == linear_layers ? output_dim : hidden_width;
      m.push_back({out, in});
      in = out;
    }
    return m;
  }
};

template <class S>
struct GeneratedLayer {
  Tensor<S> weight;  // [out x in]
  Tensor<S> bias;    // [out]
};

/// Per-instance INR weights plus the architecture they instantiate.
template <class S>
struct GeneratedINR {
  std::vector<GeneratedLayer<S>> layers;
  InrArchitecture arch;
};

/// Gaussian random Fourier matrix [F x input_dim], fixed per run.
template <class S>
Tensor<S> sample_fourier_matrix(const InrArchitecture& arch, std::mt19937_64& rng) {
  return init::normal<S>({arch.fourier_features, arch.input_dim}, 1.0, rng);
}

/// [sin(2 pi s B x), cos(2 pi s B x)] for coordinates x [n x din].
template <class S>
Tensor<S> fourier_features(const Tensor<S>& coords, const Tensor<S>& basis, S scale) {
  if (coords.rank() != 2 || basis.rank() != 2 || coords.dim(1) != basis.dim(1)) {
    throw ShapeError("coords " + to_string(coords.shape()) + " do not match Fourier basis " +
                     to_string(basis.shape()));
  }
  Tensor<S> phase = hyperfield::scale(matmul(coords, transpose(basis)), static_cast<S>(2.0 * std::numbers::pi) * scale);
  return concat<S>({sin(phase), cos(phase)}, 1);
}

/// Evaluable coordinate network bound to generated weights.
template <class S>
class Inr {
 public:
  Inr(GeneratedINR<S> weights, Tensor<S> basis, S fourier_scale)
      : gen_(std::move(weights)), basis_(std::move(basis)), scale_(fourier_scale) {
    const auto shapes = gen_.arch.matrices();
    if (shapes.size() != gen_.layers.size()) throw ShapeError("layer count does not match architecture");
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      const auto& w = gen_.layers[k].weight;
      const auto& b = gen_.layers[k].bias;
      if (w.rank() != 2 || w.dim(0) != shapes[k].out || w.dim(1) != shapes[k].in || b.size() != shapes[k].out) {
        throw ShapeError("layer " + std::to_string(k) + " has shape " + to_string(w.shape()) +
                         ", architecture expects [" + std::to_string(shapes[k].out) + "x" +
                         std::to_string(shapes[k].in) + "]");
      }
    }
    if (basis_.dim(0) != gen_.arch.fourier_features || basis_.dim(1) != gen_.arch.input_dim) {
      throw ShapeError("Fourier basis does not match architecture");
    }
  }

  const GeneratedINR<S>& weights() const { return gen_; }
  const InrArchitecture& arch() const { return gen_.arch; }
  const Tensor<S>& basis() const { return basis_; }
  S fourier_scale() const { return scale_; }

  /// Raw network output before the task transform.
  Tensor<S> raw(const Tensor<S>& coords) const {
    if (coords.rank() != 2 || coords.dim(1) != arch().input_dim) {
      throw ShapeError("coords must be [n x " + std::to_string(arch().input_dim) + "]");
    }
    if (coords.dim(0) == 0) return Tensor<S>::zeros({0, arch().output_dim});
    Tensor<S> h = fourier_features(coords, basis_, scale_);
    for (std::size_t k = 0; k < gen_.layers.size(); ++k) {
      h = linear(h, gen_.layers[k].weight, gen_.layers[k].bias);
      if (k + 1 < gen_.layers.size()) h = relu(h);
    }
    return h;
  }

  Tensor<S> evaluate(const Tensor<S>& coords) const {
    Tensor<S> out = raw(coords);
    if (out.dim(0) == 0) return out;
    const Index c = out.dim(1);
    const S lo = static_cast<S>(kLogvarMin), hi = static_cast<S>(kLogvarMax);
    switch (arch().transform) {
      case OutputTransform::identity:
        return out;
      case OutputTransform::identity_np: {
        const Index half = c / 2;
        return concat<S>({slice(out, 1, 0, half), clamp(slice(out, 1, half, half), lo, hi)}, 1);
      }
      case OutputTransform::radiance:
        return concat<S>({sigmoid(slice(out, 1, 0, 3)), relu(slice(out, 1, 3, 1))}, 1);
      case OutputTransform::radiance_np:
        return concat<S>({sigmoid(slice(out, 1, 0, 3)), clamp(slice(out, 1, 3, 3), lo, hi), relu(slice(out, 1, 6, 1))},
                         1);
    }
    return out;
  }

 private:
  GeneratedINR<S> gen_;
  Tensor<S> basis_;
  S scale_;
};

template <class S>
Inr<S> instantiate(GeneratedINR<S> gen, Tensor<S> basis, S fourier_scale) {
  return Inr<S>(std::move(gen), std::move(basis), fourier_scale);
}

template <class S>
Tensor<S> evaluate(const Inr<S>& inr, const Tensor<S>& coords) {
  return inr.evaluate(coords);
}

}  // namespace hyperfield
