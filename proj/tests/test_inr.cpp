// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/hypernetwork.hpp"
#include "hyperfield/inr.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

using namespace hyperfield;
using hyperfield::testing::random_tensor;
using Mat = Eigen::MatrixXd;

namespace {

GeneratedINR<double> random_gen(const InrArchitecture& arch, std::mt19937_64& rng) {
  GeneratedINR<double> g;
  g.arch = arch;
  for (const auto& s : arch.matrices()) {
    g.layers.push_back({random_tensor(rng, {s.out, s.in}), random_tensor(rng, {s.out}, -0.2, 0.2)});
  }
  return g;
}

// Hand-rolled forward: Fourier encoding, ReLU MLP, output transform.
Mat mlp_ref(const GeneratedINR<double>& g, const Mat& basis, double scale, const Mat& x) {
  const Mat phase = 2.0 * std::numbers::pi * scale * x * basis.transpose();
  Mat h(x.rows(), 2 * basis.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index f = 0; f < basis.rows(); ++f) {
      h(r, f) = std::sin(phase(r, f));
      h(r, basis.rows() + f) = std::cos(phase(r, f));
    }
  }
  for (std::size_t k = 0; k < g.layers.size(); ++k) {
    Mat y = h * g.layers[k].weight.matrix().transpose();
    for (Index r = 0; r < y.rows(); ++r) {
      for (Index c = 0; c < y.cols(); ++c) {
        y(r, c) += g.layers[k].bias.data()[c];
        if (k + 1 < g.layers.size()) y(r, c) = std::max(0.0, y(r, c));
      }
    }
    h = y;
  }
  auto sigmoid = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  auto clampv = [](double z) { return std::clamp(z, kLogvarMin, kLogvarMax); };
  for (Index r = 0; r < h.rows(); ++r) {
    for (Index c = 0; c < h.cols(); ++c) {
      switch (g.arch.transform) {
        case OutputTransform::identity: break;
        case OutputTransform::identity_np:
          if (c >= h.cols() / 2) h(r, c) = clampv(h(r, c));
          break;
        case OutputTransform::radiance:
          h(r, c) = c < 3 ? sigmoid(h(r, c)) : std::max(0.0, h(r, c));
          break;
        case OutputTransform::radiance_np:
          h(r, c) = c < 3 ? sigmoid(h(r, c)) : c < 6 ? clampv(h(r, c)) : std::max(0.0, h(r, c));
          break;
      }
    }
  }
  return h;
}

}  // namespace

TEST(FourierFeatures, ZeroInput) {
  std::mt19937_64 rng(0);
  InrArchitecture arch;
  const Tensor<double> basis = sample_fourier_matrix<double>(arch, rng);
  const Tensor<double> f = fourier_features(Tensor<double>::zeros({1, 3}), basis, 1.0);
  ASSERT_EQ(f.shape(), (Shape{1, 40}));
  for (Index i = 0; i < 20; ++i) EXPECT_EQ(f.data()[i], 0.0);
  for (Index i = 20; i < 40; ++i) EXPECT_EQ(f.data()[i], 1.0);
}

TEST(FourierFeatures, RangeAndWidthForAnyInputDim) {
  std::mt19937_64 rng(1);
  for (Index din : {1, 2, 3, 5}) {
    InrArchitecture arch;
    arch.input_dim = din;
    const Tensor<double> basis = sample_fourier_matrix<double>(arch, rng);
    EXPECT_EQ(basis.shape(), (Shape{20, din}));
    const Tensor<double> f = fourier_features(random_tensor(rng, {50, din}), basis, 7.0);
    EXPECT_EQ(f.shape(), (Shape{50, 40}));
    EXPECT_LE(f.values().maxCoeff(), 1.0);
    EXPECT_GE(f.values().minCoeff(), -1.0);
  }
}

TEST(FourierFeatures, IdentityPaddedBasisMatchesScalarOracle) {
  Tensor<double> basis = Tensor<double>::zeros({20, 3});
  for (Index j = 0; j < 3; ++j) basis.data()[j * 3 + j] = 1.0;
  const Tensor<double> x = Tensor<double>::from({1, 3}, {0.13, -0.71, 0.4});
  const Tensor<double> f = fourier_features(x, basis, 1.0);
  for (Index j = 0; j < 20; ++j) {
    const double phase = j < 3 ? 2.0 * std::numbers::pi * x.data()[j] : 0.0;
    EXPECT_NEAR(f.data()[j], std::sin(phase), 1e-15);
    EXPECT_NEAR(f.data()[20 + j], std::cos(phase), 1e-15);
  }
  EXPECT_THROW(fourier_features(Tensor<double>::zeros({1, 2}), basis, 1.0), ShapeError);
}

TEST(Inr, MatchesHandRolledMlpForEveryTransform) {
  std::mt19937_64 rng(2);
  const std::pair<OutputTransform, Index> cases[] = {{OutputTransform::radiance, 4},
                                                     {OutputTransform::radiance_np, 7},
                                                     {OutputTransform::identity, 1},
                                                     {OutputTransform::identity_np, 2}};
  for (auto [transform, dout] : cases) {
    InrArchitecture arch;
    arch.input_dim = transform == OutputTransform::radiance || transform == OutputTransform::radiance_np ? 3 : 1;
    arch.fourier_features = 6;
    arch.hidden_width = 9;
    arch.linear_layers = 4;
    arch.output_dim = dout;
    arch.transform = transform;
    const GeneratedINR<double> g = random_gen(arch, rng);
    const Tensor<double> basis = sample_fourier_matrix<double>(arch, rng);
    // Wide outputs so the logvar clamp is exercised.
    GeneratedINR<double> loud = g;
    loud.layers.back().weight = Tensor<double>(loud.layers.back().weight.shape(), g.layers.back().weight.values() * 20.0);
    const Tensor<double> x = random_tensor(rng, {17, arch.input_dim});
    for (const GeneratedINR<double>* gen : {&g, static_cast<const GeneratedINR<double>*>(&loud)}) {
      const Inr<double> inr = instantiate(*gen, basis, 0.8);
      const Mat ref = mlp_ref(*gen, basis.matrix(), 0.8, x.matrix());
      EXPECT_LT((evaluate(inr, x).matrix() - ref).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Inr, SingleLayerReducesToTransformOfLinearMap) {
  std::mt19937_64 rng(3);
  InrArchitecture arch;
  arch.linear_layers = 1;
  arch.fourier_features = 4;
  arch.input_dim = 2;
  arch.output_dim = 2;
  arch.transform = OutputTransform::identity;
  const GeneratedINR<double> g = random_gen(arch, rng);
  const Tensor<double> basis = sample_fourier_matrix<double>(arch, rng);
  const Tensor<double> x = random_tensor(rng, {5, 2});
  const Mat enc = fourier_features(x, basis, 1.0).matrix();
  Mat expect = enc * g.layers[0].weight.matrix().transpose();
  expect.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(g.layers[0].bias.data(), 2);
  EXPECT_LT((Inr<double>(g, basis, 1.0).evaluate(x).matrix() - expect).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Inr, EmptyBatchAndRanges) {
  std::mt19937_64 rng(4);
  InrArchitecture arch;
  // Moderate weights: large logits round sigmoid to exactly 1 in floating point.
  GeneratedINR<double> g = random_gen(arch, rng);
  for (auto& l : g.layers) l.weight.values() *= 0.2;
  const Inr<double> inr(g, sample_fourier_matrix<double>(arch, rng), 1.0);
  EXPECT_EQ(inr.evaluate(Tensor<double>::zeros({0, 3})).shape(), (Shape{0, 4}));
  const Mat y = inr.evaluate(random_tensor(rng, {200, 3})).matrix();
  EXPECT_GT(y.leftCols(3).minCoeff(), 0.0);
  EXPECT_LT(y.leftCols(3).maxCoeff(), 1.0);
  EXPECT_GE(y.col(3).minCoeff(), 0.0);
}

TEST(Inr, PureAndBatchOrderEquivariant) {
  std::mt19937_64 rng(5);
  InrArchitecture arch;
  const GeneratedINR<double> g = random_gen(arch, rng);
  const Tensor<double> basis = sample_fourier_matrix<double>(arch, rng);
  const Tensor<double> x = random_tensor(rng, {12, 3});
  const Mat a = Inr<double>(g, basis, 1.0).evaluate(x).matrix();
  const Mat b = Inr<double>(g, basis, 1.0).evaluate(x).matrix();
  EXPECT_EQ(a, b);
  std::vector<Index> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Mat xp(12, 3);
  for (Index i = 0; i < 12; ++i) xp.row(i) = x.matrix().row(perm[static_cast<std::size_t>(i)]);
  const Mat c = Inr<double>(g, basis, 1.0).evaluate(Tensor<double>::from_matrix(xp)).matrix();
  for (Index i = 0; i < 12; ++i) EXPECT_EQ(c.row(i), a.row(perm[static_cast<std::size_t>(i)]));
}

TEST(Inr, ShapeMismatchesRejected) {
  std::mt19937_64 rng(6);
  InrArchitecture arch;
  GeneratedINR<double> g = random_gen(arch, rng);
  const Tensor<double> basis = sample_fourier_matrix<double>(arch, rng);
  EXPECT_THROW(Inr<double>(g, Tensor<double>::zeros({20, 2}), 1.0), ShapeError);
  GeneratedINR<double> wrong = g;
  wrong.layers[1].weight = Tensor<double>::zeros({32, 31});
  EXPECT_THROW(Inr<double>(wrong, basis, 1.0), ShapeError);
  GeneratedINR<double> short_gen = g;
  short_gen.layers.pop_back();
  EXPECT_THROW(Inr<double>(short_gen, basis, 1.0), ShapeError);
  EXPECT_THROW(Inr<double>(g, basis, 1.0).evaluate(Tensor<double>::zeros({4, 2})), ShapeError);
}

TEST(Inr, ArchitectureCensus) {
  InrArchitecture desk;
  const auto m = desk.matrices();
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m[0], (LayerShape{32, 40}));
  EXPECT_EQ(m[2], (LayerShape{4, 32}));
  InrArchitecture full;
  full.hidden_width = 256;
  full.linear_layers = 6;
  const auto f = full.matrices();
  ASSERT_EQ(f.size(), 6u);
  EXPECT_EQ(f[0], (LayerShape{256, 40}));
  for (std::size_t k = 1; k < 5; ++k) EXPECT_EQ(f[k], (LayerShape{256, 256}));
  EXPECT_EQ(f[5], (LayerShape{4, 256}));
}

TEST(Inr, ExportRoundTripReproducesOutputs) {
  std::mt19937_64 rng(7);
  ModelSpec spec;
  spec.encoder.depth = 1;
  Hypernetwork<double> model(spec, 7);
  const Inr<double> inr = model.instantiate(random_tensor(rng, {32, 32, 3}, 0, 1));
  const TensorArchive a = decode_archive(encode_archive(export_inr(inr)));
  GeneratedINR<double> g;
  g.arch = inr.arch();
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string p = "inr.layer" + std::to_string(k);
    g.layers.push_back({a.at(p + ".weight").to_tensor<double>(), a.at(p + ".bias").to_tensor<double>()});
  }
  const Inr<double> loaded(g, a.at("inr.fourier").to_tensor<double>(), std::stod(a.metadata.at("inr.fourier_scale")));
  const Tensor<double> x = random_tensor(rng, {20, 3});
  EXPECT_EQ(inr.evaluate(x).matrix(), loaded.evaluate(x).matrix());
  EXPECT_FALSE(model.params().contains("buffer.fourier"));
  EXPECT_FALSE(model.buffers().at("buffer.fourier").requires_grad());
}
