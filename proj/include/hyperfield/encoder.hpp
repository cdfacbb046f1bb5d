// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/init.hpp"
#include "hyperfield/ops.hpp"
#include "hyperfield/params.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace hyperfield {

enum class Modality { image, audio };

struct EncoderConfig {
  Modality modality = Modality::image;
  Index width = 64;  // d
  Index depth = 4;   // N attention blocks
  Index heads = 4;
  Index ffn_mult = 4;
  // images
  Index patch = 8;
  Index image_height = 32;
  Index image_width = 32;
  Index channels = 3;
  // audio
  Index frame = 256;
  Index audio_length = 16128;  // padded clip length, a multiple of `frame`
  double ln_eps = 1e-5;

  Index data_tokens() const {
    if (modality == Modality::image) return (image_height / patch) * (image_width / patch);
    return audio_length / frame;
  }
  Index token_input_dim() const {
    return modality == Modality::image ? patch * patch * channels : frame;
  }
};

enum class LoraTargets { attention, feed_forward, all };

struct LoraSummary {
  std::vector<std::string> adapted;
  Index adapter_params = 0;
};

/// Pre-norm Transformer backbone. Parameters live in a caller-owned store
/// under the `encoder.` prefix; this class only knows their names.
template <class S>
class EncoderStack {
 public:
  EncoderStack(ParamStore<S>& store, EncoderConfig config, std::mt19937_64& rng)
      : store_(&store), config_(config) {
    const Index d = config.width;
    if (d % config.heads != 0) throw std::invalid_argument("encoder width must be divisible by heads");
    if (config.modality == Modality::image &&
        (config.image_height % config.patch != 0 || config.image_width % config.patch != 0)) {
      throw std::invalid_argument("image size must be divisible by the patch size");
    }
    if (config.modality == Modality::audio && config.audio_length % config.frame != 0) {
      throw std::invalid_argument("audio length must be divisible by the frame size");
    }
    const Index in = config.token_input_dim();
    store.add("encoder.embed.weight", init::xavier<S>(d, in, rng));
    store.add("encoder.embed.bias", Tensor<S>::zeros({d}));
    store.add("encoder.embed.pos", init::normal<S>({config.data_tokens(), d}, 0.02, rng));
    for (Index b = 0; b < config.depth; ++b) {
      const std::string p = block_prefix(b);
      add_norm(p + "ln1");
      for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.o"}) add_linear(p + proj, d, d, rng);
      add_norm(p + "ln2");
      add_linear(p + "ffn.fc1", config.ffn_mult * d, d, rng);
      add_linear(p + "ffn.fc2", d, config.ffn_mult * d, rng);
    }
    add_norm("encoder.final_norm");
  }

  const EncoderConfig& config() const { return config_; }

  /// Tokenizes an observation: an image [H x W x C] or a clip [L].
  Tensor<S> embed_observation(const Tensor<S>& observation) const {
    return add(linear(flatten_tokens(observation), p("encoder.embed.weight"), p("encoder.embed.bias")),
               p("encoder.embed.pos"));
  }

  /// Patch (or frame) matrix [m x token_input_dim], patches in row-major order.
  Tensor<S> flatten_tokens(const Tensor<S>& observation) const {
    if (config_.modality == Modality::image) {
      if (observation.rank() != 3) throw ShapeError("image observation must be [H x W x C]");
      const Index h = observation.dim(0), w = observation.dim(1), c = observation.dim(2);
      const Index ps = config_.patch;
      if (h % ps != 0 || w % ps != 0) {
        throw ShapeError("image " + to_string(observation.shape()) + " not divisible by patch " +
                         std::to_string(ps));
      }
      if (h != config_.image_height || w != config_.image_width || c != config_.channels) {
        throw ShapeError("image " + to_string(observation.shape()) + " does not match encoder config");
      }
      const Index gh = h / ps, gw = w / ps;
      Tensor<S> patches({gh * gw, ps * ps * c});
      for (Index py = 0; py < gh; ++py) {
        for (Index px = 0; px < gw; ++px) {
          S* dst = patches.data() + (py * gw + px) * ps * ps * c;
          for (Index y = 0; y < ps; ++y) {
            const S* src = observation.data() + ((py * ps + y) * w + px * ps) * c;
            std::copy(src, src + ps * c, dst + y * ps * c);
          }
        }
      }
      return patches;
    }
    if (observation.rank() != 1) throw ShapeError("audio observation must be [L]");
    if (observation.size() % config_.frame != 0) {
      throw ShapeError("clip length " + std::to_string(observation.size()) + " not divisible by frame " +
                       std::to_string(config_.frame));
    }
    if (observation.size() != config_.audio_length) {
      throw ShapeError("clip length does not match encoder config");
    }
    return Tensor<S>({observation.size() / config_.frame, config_.frame}, observation.values());
  }

  /// Runs the blocks over [data; weight] tokens and splits the result back out.
  std::pair<Tensor<S>, Tensor<S>> encode(const Tensor<S>& data_tokens, const Tensor<S>& weight_tokens) const {
    const Index d = config_.width;
    const Index m = data_tokens.dim(0);
    const Index q = weight_tokens.defined() ? weight_tokens.dim(0) : 0;
    if (data_tokens.dim(1) != d || (q > 0 && weight_tokens.dim(1) != d)) {
      throw ShapeError("token width does not match encoder width " + std::to_string(d));
    }
    Tensor<S> x = q > 0 ? concat<S>({data_tokens, weight_tokens}, 0) : data_tokens;
    for (Index b = 0; b < config_.depth; ++b) x = block(b, x);
    x = norm("encoder.final_norm", x);
    Tensor<S> data_out = slice(x, 0, 0, m);
    Tensor<S> weight_out = q > 0 ? slice(x, 0, m, q) : Tensor<S>::zeros({0, d});
    return {data_out, weight_out};
  }

  /// Adds low-rank adapters; the adapted forward is W + (alpha/rank) B A.
  LoraSummary attach_lora(LoraTargets targets, Index rank, double alpha, std::mt19937_64& rng) {
    LoraSummary summary;
    std::vector<std::string> names;
    for (Index b = 0; b < config_.depth; ++b) {
      const std::string p = block_prefix(b);
      if (targets != LoraTargets::feed_forward) {
        for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.o"}) names.push_back(p + proj);
      }
      if (targets != LoraTargets::attention) {
        names.push_back(p + "ffn.fc1");
        names.push_back(p + "ffn.fc2");
      }
    }
    for (const auto& n : names) {
      const Tensor<S>& w = p(n + ".weight");
      const Index out = w.dim(0), in = w.dim(1);
      if (rank < 1 || rank >= std::min(out, in)) {
        throw std::invalid_argument("LoRA rank " + std::to_string(rank) + " outside [1, " +
                                    std::to_string(std::min(out, in)) + ") for " + n);
      }
    }
    for (const auto& n : names) {
      const Tensor<S>& w = p(n + ".weight");
      const Index out = w.dim(0), in = w.dim(1);
      store_->add(n + ".lora_a", init::normal<S>({rank, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
      store_->add(n + ".lora_b", Tensor<S>::zeros({out, rank}));
      summary.adapted.push_back(n);
      summary.adapter_params += rank * (in + out);
    }
    lora_scale_ = static_cast<S>(alpha / static_cast<double>(rank));
    return summary;
  }

 private:
  static std::string block_prefix(Index b) { return "encoder.blocks." + std::to_string(b) + "."; }

  const Tensor<S>& p(const std::string& name) const { return store_->at(name); }

  void add_norm(const std::string& prefix) {
    store_->add(prefix + ".gamma", Tensor<S>::ones({config_.width}));
    store_->add(prefix + ".beta", Tensor<S>::zeros({config_.width}));
  }

  void add_linear(const std::string& prefix, Index out, Index in, std::mt19937_64& rng) {
    store_->add(prefix + ".weight", init::xavier<S>(out, in, rng));
    store_->add(prefix + ".bias", Tensor<S>::zeros({out}));
  }

  Tensor<S> norm(const std::string& prefix, const Tensor<S>& x) const {
    return layer_norm(x, p(prefix + ".gamma"), p(prefix + ".beta"), static_cast<S>(config_.ln_eps));
  }

  Tensor<S> project(const std::string& prefix, const Tensor<S>& x) const {
    Tensor<S> y = linear(x, p(prefix + ".weight"), p(prefix + ".bias"));
    if (!store_->contains(prefix + ".lora_a")) return y;
    Tensor<S> low = matmul(matmul(x, transpose(p(prefix + ".lora_a"))), transpose(p(prefix + ".lora_b")));
    return add(y, scale(low, lora_scale_));
  }

  Tensor<S> attention(const std::string& prefix, const Tensor<S>& x) const {
    const Index d = config_.width;
    const Index dh = d / config_.heads;
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor<S> q = project(prefix + "attn.q", x);
    Tensor<S> k = project(prefix + "attn.k", x);
    Tensor<S> v = project(prefix + "attn.v", x);
    std::vector<Tensor<S>> heads;
    for (Index h = 0; h < config_.heads; ++h) {
      Tensor<S> qh = slice(q, 1, h * dh, dh);
      Tensor<S> kh = slice(k, 1, h * dh, dh);
      Tensor<S> vh = slice(v, 1, h * dh, dh);
      Tensor<S> weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
      heads.push_back(matmul(weights, vh));
    }
    return project(prefix + "attn.o", concat(heads, 1));
  }

  Tensor<S> block(Index b, const Tensor<S>& x) const {
    const std::string pre = block_prefix(b);
    Tensor<S> h = add(x, attention(pre, norm(pre + "ln1", x)));
    Tensor<S> f = project(pre + "ffn.fc2", gelu(project(pre + "ffn.fc1", norm(pre + "ln2", h))));
    return add(h, f);
  }

  ParamStore<S>* store_;
  EncoderConfig config_;
  S lora_scale_ = S(0);
};

}  // namespace hyperfield
