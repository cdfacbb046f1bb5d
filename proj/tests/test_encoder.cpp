// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/encoder.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <random>

using namespace hyperfield;
using Mat = Eigen::MatrixXd;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.width = 8;
  c.depth = 2;
  c.heads = 2;
  c.patch = 4;
  c.image_height = 8;
  c.image_width = 12;
  return c;
}

// Every parameter gets a random value so zero-initialized biases and unit
// norms do not hide indexing mistakes.
void scramble(ParamStore<double>& store, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& [name, t] : store) {
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng) + (name.find("gamma") != std::string::npos ? 1.0 : 0.0);
  }
}

Mat as_matrix(const Tensor<double>& t) { return t.matrix(); }

Mat layer_norm_ref(const Mat& x, const Tensor<double>& g, const Tensor<double>& b, double eps) {
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    for (Index c = 0; c < x.cols(); ++c) {
      out(r, c) = (x(r, c) - mean) / std::sqrt(var + eps) * g.data()[c] + b.data()[c];
    }
  }
  return out;
}

Mat linear_ref(const ParamStore<double>& s, const std::string& p, const Mat& x, double lora_scale) {
  Mat w = as_matrix(s.at(p + ".weight"));
  if (s.contains(p + ".lora_a")) w += lora_scale * as_matrix(s.at(p + ".lora_b")) * as_matrix(s.at(p + ".lora_a"));
  Mat y = x * w.transpose();
  for (Index r = 0; r < y.rows(); ++r) {
    for (Index c = 0; c < y.cols(); ++c) y(r, c) += s.at(p + ".bias").data()[c];
  }
  return y;
}

// Straight-line pre-norm Transformer on Eigen matrices.
Mat encode_ref(const ParamStore<double>& s, const EncoderConfig& cfg, Mat x, double lora_scale = 0.0) {
  const Index dh = cfg.width / cfg.heads;
  for (Index b = 0; b < cfg.depth; ++b) {
    const std::string p = "encoder.blocks." + std::to_string(b) + ".";
    const Mat h1 = layer_norm_ref(x, s.at(p + "ln1.gamma"), s.at(p + "ln1.beta"), cfg.ln_eps);
    const Mat q = linear_ref(s, p + "attn.q", h1, lora_scale);
    const Mat k = linear_ref(s, p + "attn.k", h1, lora_scale);
    const Mat v = linear_ref(s, p + "attn.v", h1, lora_scale);
    Mat heads(x.rows(), cfg.width);
    for (Index h = 0; h < cfg.heads; ++h) {
      Mat logits = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() / std::sqrt(double(dh));
      for (Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        logits.row(r) = (logits.row(r).array() - mx).exp().matrix();
        logits.row(r) /= logits.row(r).sum();
      }
      heads.middleCols(h * dh, dh) = logits * v.middleCols(h * dh, dh);
    }
    x += linear_ref(s, p + "attn.o", heads, lora_scale);
    const Mat h2 = layer_norm_ref(x, s.at(p + "ln2.gamma"), s.at(p + "ln2.beta"), cfg.ln_eps);
    Mat f = linear_ref(s, p + "ffn.fc1", h2, lora_scale);
    f = f.unaryExpr([](double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); });
    x += linear_ref(s, p + "ffn.fc2", f, lora_scale);
  }
  return layer_norm_ref(x, s.at("encoder.final_norm.gamma"), s.at("encoder.final_norm.beta"), cfg.ln_eps);
}

double max_abs_diff(const Mat& a, const Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Encoder, OutputShapes) {
  std::mt19937_64 rng(0);
  ParamStore<float> store;
  EncoderConfig cfg;
  EncoderStack<float> enc(store, cfg, rng);
  const Tensor<float> image = hyperfield::testing::random_tensor(rng, {32, 32, 3}, 0, 1).cast<float>();
  const Tensor<float> tokens = enc.embed_observation(image);
  EXPECT_EQ(tokens.shape(), (Shape{16, 64}));
  auto [d, w] = enc.encode(tokens, Tensor<float>::zeros({38, 64}));
  EXPECT_EQ(d.shape(), (Shape{16, 64}));
  EXPECT_EQ(w.shape(), (Shape{38, 64}));
}

TEST(Encoder, PatchOrderIsRowMajor) {
  std::mt19937_64 rng(0);
  ParamStore<double> store;
  const EncoderConfig cfg = small_config();
  EncoderStack<double> enc(store, cfg, rng);
  Tensor<double> image({8, 12, 3});
  for (Index i = 0; i < image.size(); ++i) image.data()[i] = double(i);
  const Tensor<double> patches = enc.flatten_tokens(image);
  ASSERT_EQ(patches.shape(), (Shape{6, 48}));
  for (Index py = 0; py < 2; ++py) {
    for (Index px = 0; px < 3; ++px) {
      for (Index y = 0; y < 4; ++y) {
        for (Index x = 0; x < 4; ++x) {
          for (Index c = 0; c < 3; ++c) {
            const double expect = double(((py * 4 + y) * 12 + px * 4 + x) * 3 + c);
            EXPECT_EQ(patches.data()[(py * 3 + px) * 48 + (y * 4 + x) * 3 + c], expect);
          }
        }
      }
    }
  }
}

TEST(Encoder, RejectsMismatchedObservations) {
  std::mt19937_64 rng(0);
  ParamStore<double> store;
  EncoderStack<double> enc(store, small_config(), rng);
  EXPECT_THROW(enc.flatten_tokens(Tensor<double>::zeros({10, 12, 3})), ShapeError);
  EXPECT_THROW(enc.flatten_tokens(Tensor<double>::zeros({16, 12, 3})), ShapeError);
  EXPECT_THROW(enc.flatten_tokens(Tensor<double>::zeros({96})), ShapeError);
  EXPECT_THROW(enc.encode(Tensor<double>::zeros({6, 7}), Tensor<double>::zeros({2, 8})), ShapeError);

  EncoderConfig audio;
  audio.modality = Modality::audio;
  audio.width = 8;
  audio.heads = 2;
  audio.depth = 1;
  audio.frame = 16;
  audio.audio_length = 64;
  ParamStore<double> s2;
  EncoderStack<double> a(s2, audio, rng);
  EXPECT_EQ(a.flatten_tokens(Tensor<double>::zeros({64})).shape(), (Shape{4, 16}));
  EXPECT_THROW(a.flatten_tokens(Tensor<double>::zeros({60})), ShapeError);
  EXPECT_THROW(a.flatten_tokens(Tensor<double>::zeros({80})), ShapeError);
}

TEST(Encoder, InvalidConfigs) {
  std::mt19937_64 rng(0);
  ParamStore<double> store;
  EncoderConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(EncoderStack<double>(store, c, rng), std::invalid_argument);
}

TEST(Encoder, MatchesReferenceTransformer) {
  std::mt19937_64 rng(5);
  ParamStore<double> store;
  const EncoderConfig cfg = small_config();
  EncoderStack<double> enc(store, cfg, rng);
  scramble(store, rng);
  const Tensor<double> data = hyperfield::testing::random_tensor(rng, {6, 8});
  const Tensor<double> weights = hyperfield::testing::random_tensor(rng, {3, 8});
  auto [d, w] = enc.encode(data, weights);
  Mat x(9, 8);
  x << as_matrix(data), as_matrix(weights);
  const Mat ref = encode_ref(store, cfg, x);
  EXPECT_LT(max_abs_diff(as_matrix(d), ref.topRows(6)), 1e-12);
  EXPECT_LT(max_abs_diff(as_matrix(w), ref.bottomRows(3)), 1e-12);
}

TEST(Encoder, PermutingDataTokensPermutesOutputs) {
  std::mt19937_64 rng(9);
  ParamStore<double> store;
  EncoderStack<double> enc(store, small_config(), rng);
  scramble(store, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor<double> data = hyperfield::testing::random_tensor(rng, {6, 8});
    const Tensor<double> wt = hyperfield::testing::random_tensor(rng, {4, 8});
    std::vector<Index> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat permuted(6, 8);
    for (Index i = 0; i < 6; ++i) permuted.row(i) = as_matrix(data).row(perm[static_cast<std::size_t>(i)]);
    auto [d0, w0] = enc.encode(data, wt);
    auto [d1, w1] = enc.encode(Tensor<double>::from_matrix(permuted), wt);
    for (Index i = 0; i < 6; ++i) {
      EXPECT_LT((as_matrix(d1).row(i) - as_matrix(d0).row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(),
                1e-12);
    }
    EXPECT_LT(max_abs_diff(as_matrix(w0), as_matrix(w1)), 1e-12);
  }
}

TEST(Encoder, PositionalEmbeddingBreaksPermutationSymmetry) {
  std::mt19937_64 rng(2);
  ParamStore<double> store;
  EncoderStack<double> enc(store, small_config(), rng);
  Tensor<double> image({8, 12, 3});
  for (Index i = 0; i < image.size(); ++i) image.data()[i] = std::sin(0.1 * double(i));
  const Mat tokens = as_matrix(enc.embed_observation(image));
  const Mat patches = as_matrix(enc.flatten_tokens(image));
  const Mat expect = (patches * as_matrix(store.at("encoder.embed.weight")).transpose()).rowwise() +
                     Eigen::Map<const Eigen::RowVectorXd>(store.at("encoder.embed.bias").data(), 8);
  EXPECT_LT(max_abs_diff(tokens, expect + as_matrix(store.at("encoder.embed.pos"))), 1e-12);
}

TEST(Lora, IdentityAtInitialization) {
  std::mt19937_64 rng(1);
  ParamStore<double> store;
  EncoderStack<double> enc(store, small_config(), rng);
  scramble(store, rng);
  const Tensor<double> data = hyperfield::testing::random_tensor(rng, {6, 8});
  const Tensor<double> wt = hyperfield::testing::random_tensor(rng, {2, 8});
  auto [d0, w0] = enc.encode(data, wt);
  const LoraSummary s = enc.attach_lora(LoraTargets::all, 2, 8.0, rng);
  EXPECT_EQ(s.adapted.size(), 12u);
  // attn: 4 x 2 x (8 + 8); ffn: 2 x 2 x (32 + 8), per block.
  EXPECT_EQ(s.adapter_params, 2 * (4 * 2 * 16 + 2 * 2 * 40));
  auto [d1, w1] = enc.encode(data, wt);
  EXPECT_EQ(max_abs_diff(as_matrix(d0), as_matrix(d1)), 0.0);
  EXPECT_EQ(max_abs_diff(as_matrix(w0), as_matrix(w1)), 0.0);
}

TEST(Lora, AdaptedForwardEqualsMergedWeights) {
  std::mt19937_64 rng(4);
  ParamStore<double> store;
  const EncoderConfig cfg = small_config();
  EncoderStack<double> enc(store, cfg, rng);
  scramble(store, rng);
  enc.attach_lora(LoraTargets::attention, 3, 6.0, rng);
  for (auto& [name, t] : store) {
    if (name.find(".lora_b") != std::string::npos) t.values() = hyperfield::testing::random_tensor(rng, t.shape()).values();
  }
  EXPECT_FALSE(store.contains("encoder.blocks.0.ffn.fc1.lora_a"));
  const Tensor<double> data = hyperfield::testing::random_tensor(rng, {6, 8});
  auto [d, w] = enc.encode(data, Tensor<double>());
  EXPECT_EQ(w.dim(0), 0);
  EXPECT_LT(max_abs_diff(as_matrix(d), encode_ref(store, cfg, as_matrix(data), 6.0 / 3.0)), 1e-12);
}

TEST(Lora, RankBoundsAndTargets) {
  std::mt19937_64 rng(0);
  for (LoraTargets t : {LoraTargets::attention, LoraTargets::feed_forward, LoraTargets::all}) {
    ParamStore<double> store;
    EncoderStack<double> enc(store, small_config(), rng);
    const Index before = store.size();
    EXPECT_THROW(enc.attach_lora(t, 0, 1.0, rng), std::invalid_argument);
    EXPECT_THROW(enc.attach_lora(t, 8, 1.0, rng), std::invalid_argument);
    EXPECT_EQ(store.size(), before);
    const LoraSummary s = enc.attach_lora(t, 7, 1.0, rng);
    const std::size_t per_block = t == LoraTargets::attention ? 4 : t == LoraTargets::feed_forward ? 2 : 6;
    EXPECT_EQ(s.adapted.size(), 2 * per_block);
  }
}
