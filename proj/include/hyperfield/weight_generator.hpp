// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/init.hpp"
#include "hyperfield/inr.hpp"
#include "hyperfield/ops.hpp"
#include "hyperfield/params.hpp"

#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace hyperfield {

/// Allocation of weight tokens to generated layers. Each layer k owns the
/// contiguous token range [first_token, first_token + tokens).
struct GroupPlan {
  struct Layer {
    LayerShape shape;
    Index params = 0;       // P_k
    Index tokens = 0;       // r_k = ceil(P_k / g)
    Index first_token = 0;
    Index overflow = 0;     // r_k * g - P_k, discarded from the tail
  };

  Index chunk = 0;  // g
  std::vector<Layer> layers;
  Index total_tokens = 0;  // q
  std::vector<std::string> warnings;

  /// `key = value` lines for run metadata.
  std::string serialize() const {
    std::ostringstream os;
    os << "plan.g = " << chunk << "\n";
    os << "plan.q = " << total_tokens << "\n";
    os << "plan.layers = " << layers.size() << "\n";
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      os << "plan.layer" << k << " = out=" << l.shape.out << " in=" << l.shape.in << " params=" << l.params
         << " tokens=" << l.tokens << " first=" << l.first_token << " overflow=" << l.overflow << "\n";
    }
    return os.str();
  }
};

inline GroupPlan plan_groups(const std::vector<LayerShape>& shapes, Index g) {
  if (g < 1) throw std::invalid_argument("group size g must be >= 1");
  if (shapes.empty()) throw std::invalid_argument("no layers to generate");
  GroupPlan plan;
  plan.chunk = g;
  Index largest = 0;
  for (const auto& s : shapes) {
    GroupPlan::Layer l;
    l.shape = s;
    l.params = s.count();
    l.tokens = (l.params + g - 1) / g;
    l.first_token = plan.total_tokens;
    l.overflow = l.tokens * g - l.params;
    plan.total_tokens += l.tokens;
    largest = std::max(largest, l.params);
    plan.layers.push_back(l);
  }
  if (g > largest) {
    plan.warnings.push_back("group size " + std::to_string(g) + " exceeds the largest layer (" +
                            std::to_string(largest) + " weights); every layer gets one token");
  }
  return plan;
}

inline GroupPlan plan_groups(const InrArchitecture& arch, Index g) { return plan_groups(arch.matrices(), g); }

/// One linear head d -> g per generated layer.
template <class S>
struct HeadBank {
  std::vector<Tensor<S>> weights;  // [g x d]
  std::vector<Tensor<S>> biases;   // [g]

  static HeadBank create(ParamStore<S>& store, const GroupPlan& plan, Index width, std::mt19937_64& rng,
                         const std::string& prefix = "hyper.head.") {
    HeadBank h;
    for (std::size_t k = 0; k < plan.layers.size(); ++k) {
      const std::string p = prefix + std::to_string(k);
      h.weights.push_back(store.add(p + ".weight", init::xavier<S>(plan.chunk, width, rng)));
      h.biases.push_back(store.add(p + ".bias", Tensor<S>::zeros({plan.chunk})));
    }
    return h;
  }
};

/// Shared per-layer base parameters and biases.
template <class S>
struct BaseParamBank {
  std::vector<Tensor<S>> base;    // [out x in]
  std::vector<Tensor<S>> biases;  // [out], never modulated

  // Base entries are drawn from U(-1/sqrt(in), 1/sqrt(in)) so none start at zero.
  static BaseParamBank create(ParamStore<S>& store, const GroupPlan& plan, std::mt19937_64& rng) {
    BaseParamBank b;
    for (std::size_t k = 0; k < plan.layers.size(); ++k) {
      const auto& s = plan.layers[k].shape;
      const double lim = 1.0 / std::sqrt(static_cast<double>(s.in));
      Tensor<S> w = init::uniform<S>({s.out, s.in}, -lim, lim, rng);
      for (Index i = 0; i < w.size(); ++i) {
        if (w.data()[i] == S(0)) w.data()[i] = static_cast<S>(lim * 0.5);
      }
      b.base.push_back(store.add("hyper.base." + std::to_string(k), w));
      b.biases.push_back(store.add("hyper.bias." + std::to_string(k), Tensor<S>::zeros({s.out})));
    }
    return b;
  }
};

inline constexpr double kNormEps = 1e-12;

/// Concatenated head outputs for `tokens`, truncated to `count` and shaped [out x in].
template <class S>
Tensor<S> head_to_matrix(const Tensor<S>& tokens, const Tensor<S>& weight, const Tensor<S>& bias, LayerShape shape) {
  Tensor<S> chunks = linear(tokens, weight, bias);  // [r x g]
  Tensor<S> flat = reshape(chunks, {1, chunks.size()});
  if (flat.size() > shape.count()) flat = slice(flat, 1, 0, shape.count());
  return reshape(flat, {shape.out, shape.in});
}

/// L_k = Norm(Head_k(tokens of layer k) * BaseParam_k), row-wise unit L2 norm.
template <class S>
GeneratedINR<S> generate_weights(const Tensor<S>& weight_out, const GroupPlan& plan, const HeadBank<S>& heads,
                                 const BaseParamBank<S>& base, const InrArchitecture& arch) {
  if (weight_out.rank() != 2 || weight_out.dim(0) != plan.total_tokens) {
    throw ShapeError("weight tokens " + to_string(weight_out.shape()) + " do not match plan q=" +
                     std::to_string(plan.total_tokens));
  }
  if (heads.weights.size() != plan.layers.size() || base.base.size() != plan.layers.size()) {
    throw ShapeError("head/base banks do not match the plan");
  }
  GeneratedINR<S> gen;
  gen.arch = arch;
  for (std::size_t k = 0; k < plan.layers.size(); ++k) {
    const auto& l = plan.layers[k];
    if (heads.weights[k].dim(0) != plan.chunk || heads.weights[k].dim(1) != weight_out.dim(1)) {
      throw ShapeError("head " + std::to_string(k) + " is not [g x d]");
    }
    if (base.base[k].dim(0) != l.shape.out || base.base[k].dim(1) != l.shape.in) {
      throw ShapeError("base parameter " + std::to_string(k) + " does not match the plan");
    }
    Tensor<S> tokens = slice(weight_out, 0, l.first_token, l.tokens);
    Tensor<S> modulation = head_to_matrix(tokens, heads.weights[k], heads.biases[k], l.shape);
    Tensor<S> w = l2_normalize(mul(modulation, base.base[k]), 1, static_cast<S>(kNormEps));
    gen.layers.push_back({w, base.biases[k]});
  }
  return gen;
}

/// Shared INR for the weight-sharing variant: every layer is a plain shared
/// parameter except `target`, which is U_shared [out x R] times a per-instance V [R x in].
template <class S>
struct IpcBank {
  std::vector<Tensor<S>> shared;  // unused slot at `target`
  std::vector<Tensor<S>> biases;
  Tensor<S> basis_u;              // [out x R]
  Tensor<S> head_weight;          // [g x d]
  Tensor<S> head_bias;            // [g]
  GroupPlan plan;                 // single-layer plan for V
  Index target = 1;
  Index rank = 16;

  static IpcBank create(ParamStore<S>& store, const InrArchitecture& arch, Index target, Index rank, Index g,
                        Index width, std::mt19937_64& rng) {
    const auto shapes = arch.matrices();
    if (target < 0 || target >= static_cast<Index>(shapes.size())) {
      throw std::invalid_argument("IPC target layer out of range");
    }
    const LayerShape ts = shapes[static_cast<std::size_t>(target)];
    if (rank < 1 || rank > std::min(ts.out, ts.in)) {
      throw std::invalid_argument("IPC rank " + std::to_string(rank) + " outside [1, " +
                                  std::to_string(std::min(ts.out, ts.in)) + "]");
    }
    IpcBank b;
    b.target = target;
    b.rank = rank;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      const auto& s = shapes[k];
      const std::string ks = std::to_string(k);
      if (static_cast<Index>(k) == target) {
        b.shared.emplace_back();
      } else {
        b.shared.push_back(store.add("hyper.shared." + ks, init::xavier<S>(s.out, s.in, rng)));
      }
      const double lim = 1.0 / std::sqrt(static_cast<double>(s.in));
      b.biases.push_back(store.add("hyper.bias." + ks, init::uniform<S>({s.out}, -lim, lim, rng)));
    }
    b.basis_u = store.add("hyper.ipc_u", init::uniform<S>({ts.out, rank}, -1.0 / std::sqrt(double(rank)),
                                                          1.0 / std::sqrt(double(rank)), rng));
    b.plan = plan_groups(std::vector<LayerShape>{{rank, ts.in}}, g);
    b.head_weight = store.add("hyper.head.0.weight", init::xavier<S>(g, width, rng));
    b.head_bias = store.add("hyper.head.0.bias", Tensor<S>::zeros({g}));
    return b;
  }
};

/// Instance weights: shared everywhere except the target, W_j = U_shared V_instance.
template <class S>
GeneratedINR<S> ipc_modulate(const IpcBank<S>& bank, const Tensor<S>& weight_out, const InrArchitecture& arch) {
  const auto shapes = arch.matrices();
  const LayerShape ts = shapes[static_cast<std::size_t>(bank.target)];
  if (bank.rank > std::min(ts.out, ts.in)) throw std::invalid_argument("IPC rank too large");
  if (weight_out.rank() != 2 || weight_out.dim(0) != bank.plan.total_tokens) {
    throw ShapeError("IPC expects " + std::to_string(bank.plan.total_tokens) + " weight tokens");
  }
  Tensor<S> v = head_to_matrix(weight_out, bank.head_weight, bank.head_bias, LayerShape{bank.rank, ts.in});
  GeneratedINR<S> gen;
  gen.arch = arch;
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    if (static_cast<Index>(k) == bank.target) {
      gen.layers.push_back({matmul(bank.basis_u, v), bank.biases[k]});
    } else {
      gen.layers.push_back({bank.shared[k], bank.biases[k]});
    }
  }
  return gen;
}

}  // namespace hyperfield
