// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace hyperfield {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  Index worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` must rebuild the scalar loss from the current parameter values
/// each call. The error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
template <class Fn>
GradCheckResult finite_diff_report(Fn&& loss_fn, std::vector<Tensor<double>> params, double h = 1e-5) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> loss = loss_fn();
    tape.backward(loss);
  }

  GradCheckResult result;
  NoGradScope<double> no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    Buffer<double> analytic = p.has_grad() ? p.grad() : Buffer<double>::Zero(p.size());
    for (Index i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + h;
      const double fp = loss_fn().item();
      p.data()[i] = saved - h;
      const double fm = loss_fn().item();
      p.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > result.max_relative_error) {
        result = {err, k, i, a, numeric};
      }
    }
  }
  return result;
}

template <class Fn>
double finite_diff_check(Fn&& loss_fn, std::vector<Tensor<double>> params, double h = 1e-5) {
  return finite_diff_report(std::forward<Fn>(loss_fn), std::move(params), h).max_relative_error;
}

}  // namespace hyperfield
