// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/params.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyperfield {

enum class Scheduler { step, cos };

inline constexpr double kWarmupFraction = 0.1;
inline constexpr double kDropFraction = 0.8;

/// Learning rate at `step` of `total_steps`.
inline double lr_at(Scheduler sched, double base_lr, Index step, Index total_steps) {
  if (total_steps <= 0) return base_lr;
  const double s = static_cast<double>(step);
  const double total = static_cast<double>(total_steps);
  if (sched == Scheduler::step) return s < kDropFraction * total ? base_lr : base_lr * 0.1;
  const double warmup = kWarmupFraction * total;
  if (s < warmup) return base_lr * s / warmup;
  if (total - warmup <= 0.0) return base_lr;
  const double progress = (s - warmup) / (total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Bias-corrected Adam over the trainable entries of a ParamStore.
template <class S>
class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit Adam(const ParamStore<S>& store) {
    for (const auto& [name, t] : store) {
      if (!t.requires_grad()) continue;
      slots_.push_back({name, t, Buffer<S>::Zero(t.size()), Buffer<S>::Zero(t.size())});
    }
  }

  Index steps() const { return t_; }

  /// Every trainable parameter must carry a gradient; a parameter that took no
  /// part in the loss is an error, not a silent skip.
  void step(double lr) {
    for (const auto& s : slots_) {
      if (!s.param.has_grad()) throw std::logic_error("trainable parameter '" + s.name + "' has no gradient");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      Tensor<S> p = s.param;
      const auto& g = p.grad();
      S* w = p.data();
      for (Index i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        s.m[i] = static_cast<S>(beta1 * static_cast<double>(s.m[i]) + (1.0 - beta1) * gi);
        s.v[i] = static_cast<S>(beta2 * static_cast<double>(s.v[i]) + (1.0 - beta2) * gi * gi);
        const double mhat = static_cast<double>(s.m[i]) / c1;
        const double vhat = static_cast<double>(s.v[i]) / c2;
        w[i] = static_cast<S>(static_cast<double>(w[i]) - lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    Tensor<S> param;
    Buffer<S> m;
    Buffer<S> v;
  };
  std::vector<Slot> slots_;
  Index t_ = 0;
};

}  // namespace hyperfield
