// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/tensor.hpp"

#include <cmath>
#include <random>

namespace hyperfield::init {

template <class S>
Tensor<S> uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(dist(rng));
  return t;
}

template <class S>
Tensor<S> normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(dist(rng));
  return t;
}

/// Glorot uniform for a [out x in] weight.
template <class S>
Tensor<S> xavier(Index out, Index in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  return uniform<S>({out, in}, -limit, limit, rng);
}

}  // namespace hyperfield::init
