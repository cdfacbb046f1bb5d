// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/archive.hpp"
#include "hyperfield/encoder.hpp"
#include "hyperfield/inr.hpp"
#include "hyperfield/weight_generator.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>

namespace hyperfield {

enum class Generator { modulated, shared };

struct ModelSpec {
  EncoderConfig encoder;
  InrArchitecture inr;
  Generator generator = Generator::modulated;
  Index group_size = 64;
  double token_init_std = 1.0;
  double fourier_scale = 1.0;
  Index ipc_rank = 16;
  Index ipc_target = 1;
};

/// Encoder, weight tokens and weight generator over one parameter store.
/// The Fourier basis is a fixed buffer kept apart from the parameters.
template <class S>
class Hypernetwork {
 public:
  Hypernetwork(const ModelSpec& spec, std::uint64_t seed)
      : spec_(spec), store_(std::make_unique<ParamStore<S>>()) {
    std::mt19937_64 rng(seed);
    encoder_.emplace(*store_, spec.encoder, rng);
    buffers_.add("buffer.fourier", sample_fourier_matrix<S>(spec.inr, rng), false);
    const Index d = spec.encoder.width;
    if (spec.generator == Generator::shared) {
      ipc_ = IpcBank<S>::create(*store_, spec.inr, spec.ipc_target, spec.ipc_rank, spec.group_size, d, rng);
      plan_ = ipc_->plan;
    } else {
      plan_ = plan_groups(spec.inr, spec.group_size);
    }
    tokens_ = store_->add("hyper.tokens", init::normal<S>({plan_.total_tokens, d}, spec.token_init_std, rng));
    if (spec.generator != Generator::shared) {
      heads_ = HeadBank<S>::create(*store_, plan_, d, rng);
      base_ = BaseParamBank<S>::create(*store_, plan_, rng);
    }
  }

  const ModelSpec& spec() const { return spec_; }
  const GroupPlan& plan() const { return plan_; }
  ParamStore<S>& params() { return *store_; }
  const ParamStore<S>& params() const { return *store_; }
  ParamStore<S>& buffers() { return buffers_; }
  const ParamStore<S>& buffers() const { return buffers_; }
  EncoderStack<S>& encoder() { return *encoder_; }
  const EncoderStack<S>& encoder() const { return *encoder_; }
  const Tensor<S>& fourier_basis() const { return buffers_.at("buffer.fourier"); }

  LoraSummary attach_lora(LoraTargets targets, Index rank, double alpha, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return encoder_->attach_lora(targets, rank, alpha, rng);
  }

  /// Encoder outputs at the weight-token positions for one observation.
  Tensor<S> weight_tokens(const Tensor<S>& observation) const {
    return encoder_->encode(encoder_->embed_observation(observation), tokens_).second;
  }

  GeneratedINR<S> generate(const Tensor<S>& observation) const {
    const Tensor<S> out = weight_tokens(observation);
    if (ipc_) return ipc_modulate(*ipc_, out, spec_.inr);
    return generate_weights(out, plan_, *heads_, *base_, spec_.inr);
  }

  Inr<S> instantiate(const Tensor<S>& observation) const {
    return Inr<S>(generate(observation), fourier_basis(), static_cast<S>(spec_.fourier_scale));
  }

  /// Parameters and buffers as one archive.
  TensorArchive to_archive(const std::map<std::string, std::string>& metadata = {}) const {
    TensorArchive a;
    a.metadata = metadata;
    for (const auto& [name, t] : *store_) a.put(name, ArchivedTensor::from_tensor(t));
    for (const auto& [name, t] : buffers_) a.put(name, ArchivedTensor::from_tensor(t));
    return a;
  }

  /// Copies values for every name in `archive` that starts with `prefix`.
  /// With `exact`, the archive must cover every parameter and buffer.
  Index load_values(const TensorArchive& archive, const std::string& prefix = "", bool exact = false) {
    Index loaded = 0;
    auto copy_into = [&](ParamStore<S>& store) {
      for (auto& [name, t] : store) {
        if (name.compare(0, prefix.size(), prefix) != 0) continue;
        if (!archive.contains(name)) {
          if (exact) throw std::runtime_error("archive is missing '" + name + "'");
          continue;
        }
        Tensor<S> v = archive.at(name).template to_tensor<S>();
        if (v.shape() != t.shape()) {
          throw ShapeError("archive tensor '" + name + "' has shape " + to_string(v.shape()) + ", model expects " +
                           to_string(t.shape()));
        }
        std::copy(v.data(), v.data() + v.size(), t.data());
        ++loaded;
      }
    };
    copy_into(*store_);
    copy_into(buffers_);
    if (exact) {
      for (const auto& [name, t] : archive.entries) {
        if (!store_->contains(name) && !buffers_.contains(name)) {
          throw std::runtime_error("archive has unknown tensor '" + name + "'");
        }
      }
    }
    return loaded;
  }

 private:
  ModelSpec spec_;
  std::unique_ptr<ParamStore<S>> store_;
  ParamStore<S> buffers_;
  std::optional<EncoderStack<S>> encoder_;
  GroupPlan plan_;
  Tensor<S> tokens_;
  std::optional<HeadBank<S>> heads_;
  std::optional<BaseParamBank<S>> base_;
  std::optional<IpcBank<S>> ipc_;
};

/// Standalone INR archive: `inr.layer{k}.weight`, `inr.layer{k}.bias`, `inr.fourier`.
template <class S>
TensorArchive export_inr(const Inr<S>& inr, const std::map<std::string, std::string>& metadata = {}) {
  TensorArchive a;
  a.metadata = metadata;
  const auto& w = inr.weights();
  for (std::size_t k = 0; k < w.layers.size(); ++k) {
    const std::string p = "inr.layer" + std::to_string(k);
    a.put(p + ".weight", ArchivedTensor::from_tensor(w.layers[k].weight.detach()));
    a.put(p + ".bias", ArchivedTensor::from_tensor(w.layers[k].bias.detach()));
  }
  a.put("inr.fourier", ArchivedTensor::from_tensor(inr.basis().detach()));
  a.metadata["inr.fourier_scale"] = std::to_string(static_cast<double>(inr.fourier_scale()));
  return a;
}

}  // namespace hyperfield
