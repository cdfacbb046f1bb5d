// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/hypernetwork.hpp"
#include "hyperfield/weight_generator.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <random>

using namespace hyperfield;
using hyperfield::testing::random_tensor;
using Mat = Eigen::MatrixXd;

namespace {

Mat row_normalized(Mat m) {
  for (Index r = 0; r < m.rows(); ++r) m.row(r) /= std::max(m.row(r).norm(), 1e-12);
  return m;
}

InrArchitecture tiny_arch() {
  InrArchitecture a;
  a.input_dim = 2;
  a.fourier_features = 2;
  a.hidden_width = 4;
  a.linear_layers = 3;
  a.output_dim = 3;
  a.transform = OutputTransform::identity;
  return a;
}

ModelSpec tiny_spec(Generator gen) {
  ModelSpec s;
  s.encoder.width = 8;
  s.encoder.depth = 1;
  s.encoder.heads = 2;
  s.encoder.patch = 4;
  s.encoder.image_height = s.encoder.image_width = 8;
  s.inr = tiny_arch();
  s.generator = gen;
  s.group_size = 4;
  s.ipc_rank = 2;
  s.ipc_target = 1;
  return s;
}

}  // namespace

TEST(GroupPlan, CeilRule) {
  const GroupPlan exact = plan_groups(std::vector<LayerShape>{{32, 32}}, 256);
  EXPECT_EQ(exact.layers[0].tokens, 4);
  EXPECT_EQ(exact.layers[0].overflow, 0);
  const GroupPlan inexact = plan_groups(std::vector<LayerShape>{{25, 40}}, 256);
  EXPECT_EQ(inexact.layers[0].tokens, 4);
  EXPECT_EQ(inexact.layers[0].overflow, 24);
}

TEST(GroupPlan, DeskCensus) {
  InrArchitecture desk;
  const GroupPlan plan = plan_groups(desk, 64);
  ASSERT_EQ(plan.layers.size(), 3u);
  EXPECT_EQ(plan.layers[0].shape, (LayerShape{32, 40}));
  EXPECT_EQ(plan.layers[1].shape, (LayerShape{32, 32}));
  EXPECT_EQ(plan.layers[2].shape, (LayerShape{4, 32}));
  EXPECT_EQ(plan.layers[0].tokens, 20);
  EXPECT_EQ(plan.layers[1].tokens, 16);
  EXPECT_EQ(plan.layers[2].tokens, 2);
  EXPECT_EQ(plan.total_tokens, 38);
  EXPECT_NE(plan.serialize().find("plan.q = 38"), std::string::npos);
  EXPECT_TRUE(plan.warnings.empty());
}

TEST(GroupPlan, RangesAreContiguousAndCoverAllTokens) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<LayerShape> shapes;
    const Index n = hyperfield::testing::random_extent(rng, 1, 6);
    for (Index k = 0; k < n; ++k) {
      shapes.push_back({hyperfield::testing::random_extent(rng, 1, 40), hyperfield::testing::random_extent(rng, 1, 40)});
    }
    const Index g = hyperfield::testing::random_extent(rng, 1, 300);
    const GroupPlan plan = plan_groups(shapes, g);
    Index next = 0;
    Index largest = 0;
    for (const auto& l : plan.layers) {
      EXPECT_EQ(l.first_token, next);
      EXPECT_GE(l.tokens * g, l.params);
      EXPECT_LT(l.overflow, g);
      EXPECT_GE(l.tokens, 1);
      next += l.tokens;
      largest = std::max(largest, l.params);
    }
    EXPECT_EQ(next, plan.total_tokens);
    EXPECT_EQ(plan.warnings.empty(), g <= largest);
  }
  EXPECT_THROW(plan_groups(std::vector<LayerShape>{{2, 2}}, 0), std::invalid_argument);
}

TEST(GenerateWeights, AllOnesHeadGivesNormalizedBase) {
  std::mt19937_64 rng(1);
  ParamStore<double> store;
  const GroupPlan plan = plan_groups(std::vector<LayerShape>{{3, 5}}, 4);
  HeadBank<double> heads = HeadBank<double>::create(store, plan, 6, rng);
  BaseParamBank<double> base = BaseParamBank<double>::create(store, plan, rng);
  heads.weights[0].values().setZero();
  heads.biases[0].values().setOnes();
  InrArchitecture arch;
  const GeneratedINR<double> g = generate_weights(random_tensor(rng, {plan.total_tokens, 6}), plan, heads, base, arch);
  EXPECT_LT((g.layers[0].weight.matrix() - row_normalized(base.base[0].matrix())).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(g.layers[0].bias.data(), base.biases[0].data());
}

TEST(GenerateWeights, AllOnesBaseGivesNormalizedHeadOutput) {
  std::mt19937_64 rng(2);
  ParamStore<double> store;
  const GroupPlan plan = plan_groups(std::vector<LayerShape>{{2, 3}}, 6);
  ASSERT_EQ(plan.total_tokens, 1);
  HeadBank<double> heads = HeadBank<double>::create(store, plan, 4, rng);
  BaseParamBank<double> base = BaseParamBank<double>::create(store, plan, rng);
  base.base[0].values().setOnes();
  const Tensor<double> token = random_tensor(rng, {1, 4});
  const GeneratedINR<double> g = generate_weights(token, plan, heads, base, InrArchitecture{});
  const Eigen::VectorXd v = heads.weights[0].matrix() * token.matrix().transpose();
  Mat reshaped(2, 3);
  for (Index i = 0; i < 6; ++i) reshaped(i / 3, i % 3) = v(i);
  EXPECT_LT((g.layers[0].weight.matrix() - row_normalized(reshaped)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GenerateWeights, MatchesThreeStepOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore<double> store;
    // Two layers so the second reads a non-zero token offset and truncates overflow.
    const GroupPlan plan = plan_groups(std::vector<LayerShape>{{2, 2}, {3, 3}}, 4);
    HeadBank<double> heads = HeadBank<double>::create(store, plan, 4, rng);
    BaseParamBank<double> base = BaseParamBank<double>::create(store, plan, rng);
    for (auto& [n, t] : store) t.values() = random_tensor(rng, t.shape()).values();
    const Tensor<double> tokens = random_tensor(rng, {plan.total_tokens, 4});
    const GeneratedINR<double> g = generate_weights(tokens, plan, heads, base, InrArchitecture{});
    for (std::size_t k = 0; k < 2; ++k) {
      const auto& l = plan.layers[k];
      std::vector<double> flat;
      for (Index r = 0; r < l.tokens; ++r) {
        for (Index j = 0; j < 4; ++j) {
          double s = heads.biases[k].data()[j];
          for (Index c = 0; c < 4; ++c) {
            s += heads.weights[k].data()[j * 4 + c] * tokens.data()[(l.first_token + r) * 4 + c];
          }
          flat.push_back(s);
        }
      }
      for (Index r = 0; r < l.shape.out; ++r) {
        double norm = 0.0;
        std::vector<double> row;
        for (Index c = 0; c < l.shape.in; ++c) {
          const Index i = r * l.shape.in + c;
          row.push_back(flat[static_cast<std::size_t>(i)] * base.base[k].data()[i]);
          norm += row.back() * row.back();
        }
        norm = std::sqrt(norm);
        for (Index c = 0; c < l.shape.in; ++c) {
          EXPECT_NEAR(g.layers[k].weight.data()[r * l.shape.in + c], row[static_cast<std::size_t>(c)] / norm, 1e-12);
        }
      }
    }
  }
}

TEST(GenerateWeights, RowNormsOnDeskModel) {
  std::mt19937_64 rng(4);
  Hypernetwork<double> model(ModelSpec{}, 4);
  Hypernetwork<float> model32(ModelSpec{}, 4);
  const Tensor<double> image = random_tensor(rng, {32, 32, 3}, 0, 1);
  const GeneratedINR<double> g = model.generate(image);
  const GeneratedINR<float> g32 = model32.generate(image.cast<float>());
  ASSERT_EQ(g.layers.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    const Mat w = g.layers[k].weight.matrix();
    EXPECT_LT((w.rowwise().norm().array() - 1.0).abs().maxCoeff(), 1e-10);
    const Eigen::MatrixXf w32 = g32.layers[k].weight.matrix();
    EXPECT_LT((w32.rowwise().norm().array() - 1.0f).abs().maxCoeff(), 1e-5f);
  }
}

TEST(GenerateWeights, PositiveRowScaleInvariance) {
  std::mt19937_64 rng(5);
  ParamStore<double> store;
  const GroupPlan plan = plan_groups(std::vector<LayerShape>{{4, 6}}, 8);
  HeadBank<double> heads = HeadBank<double>::create(store, plan, 5, rng);
  BaseParamBank<double> base = BaseParamBank<double>::create(store, plan, rng);
  const Tensor<double> tokens = random_tensor(rng, {plan.total_tokens, 5});
  const Mat before = generate_weights(tokens, plan, heads, base, InrArchitecture{}).layers[0].weight.matrix();
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (Index r = 0; r < 4; ++r) base.base[0].matrix().row(r) *= scale(rng);
  const Mat after = generate_weights(tokens, plan, heads, base, InrArchitecture{}).layers[0].weight.matrix();
  EXPECT_LT((before - after).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(GenerateWeights, GradientsReachHeadsBaseAndTokens) {
  std::mt19937_64 rng(6);
  Hypernetwork<double> model(tiny_spec(Generator::modulated), 6);
  const Tensor<double> image = random_tensor(rng, {8, 8, 3}, 0, 1);
  const Tensor<double> coords = random_tensor(rng, {5, 2});
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward([&] { const auto y = model.instantiate(image).evaluate(coords); return sum(mul(y, y)); }());
  }
  for (const auto& [name, t] : model.params()) {
    if (name.rfind("hyper.", 0) != 0) continue;
    ASSERT_TRUE(t.has_grad()) << name;
    EXPECT_GT(t.grad().matrix().cwiseAbs().maxCoeff(), 0.0) << name;
  }
}

TEST(GenerateWeights, PureAndValidated) {
  std::mt19937_64 rng(7);
  Hypernetwork<double> model(tiny_spec(Generator::modulated), 7);
  const Tensor<double> image = random_tensor(rng, {8, 8, 3}, 0, 1);
  const GeneratedINR<double> a = model.generate(image);
  const GeneratedINR<double> b = model.generate(image);
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    EXPECT_EQ(a.layers[k].weight.matrix(), b.layers[k].weight.matrix());
  }
  ParamStore<double> store;
  const GroupPlan plan = plan_groups(std::vector<LayerShape>{{2, 2}}, 4);
  const HeadBank<double> heads = HeadBank<double>::create(store, plan, 4, rng);
  const BaseParamBank<double> base = BaseParamBank<double>::create(store, plan, rng);
  EXPECT_THROW(generate_weights(Tensor<double>::zeros({2, 4}), plan, heads, base, InrArchitecture{}), ShapeError);
  EXPECT_THROW(generate_weights(Tensor<double>::zeros({1, 3}), plan, heads, base, InrArchitecture{}), ShapeError);
}

TEST(Ipc, NonTargetLayersSharedAcrossInstances) {
  std::mt19937_64 rng(9);
  Hypernetwork<double> model(tiny_spec(Generator::shared), 9);
  std::vector<GeneratedINR<double>> gens;
  for (int i = 0; i < 4; ++i) gens.push_back(model.generate(random_tensor(rng, {8, 8, 3}, 0, 1)));
  for (std::size_t i = 1; i < gens.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(gens[i].layers[k].bias.data(), gens[0].layers[k].bias.data());
      if (k == 1) {
        EXPECT_GT((gens[i].layers[k].weight.matrix() - gens[0].layers[k].weight.matrix()).cwiseAbs().maxCoeff(), 0.0);
      } else {
        EXPECT_EQ(gens[i].layers[k].weight.data(), gens[0].layers[k].weight.data());
      }
    }
  }
}

TEST(Ipc, TargetRankBoundedByJacobiSvd) {
  std::mt19937_64 rng(10);
  Hypernetwork<double> model(tiny_spec(Generator::shared), 10);
  for (int i = 0; i < 5; ++i) {
    const Mat w = model.generate(random_tensor(rng, {8, 8, 3}, 0, 1)).layers[1].weight.matrix();
    ASSERT_EQ(w.rows(), 4);
    ASSERT_EQ(w.cols(), 4);
    const Eigen::JacobiSVD<Mat> svd(w);
    const auto s = svd.singularValues();
    EXPECT_GT(s(1), 1e-8);
    EXPECT_LT(s(2), 1e-8);
    EXPECT_LT(s(3), 1e-8);
  }
}

TEST(Ipc, FullRankFactorReachesUnconstrainedMatrix) {
  std::mt19937_64 rng(11);
  ParamStore<double> store;
  const InrArchitecture arch = tiny_arch();
  IpcBank<double> bank = IpcBank<double>::create(store, arch, 1, 4, 16, 6, rng);
  // Head emits the identity as V; U then appears verbatim as the target.
  bank.head_weight.values().setZero();
  for (Index i = 0; i < 16; ++i) bank.head_bias.data()[i] = i % 5 == 0 ? 1.0 : 0.0;
  const Mat target = random_tensor(rng, {4, 4}).matrix();
  bank.basis_u.matrix() = target;
  const GeneratedINR<double> g = ipc_modulate(bank, random_tensor(rng, {1, 6}), arch);
  EXPECT_LT((g.layers[1].weight.matrix() - target).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Ipc, RankAndTargetValidation) {
  std::mt19937_64 rng(12);
  ParamStore<double> store;
  EXPECT_THROW(IpcBank<double>::create(store, tiny_arch(), 1, 5, 4, 6, rng), std::invalid_argument);
  EXPECT_THROW(IpcBank<double>::create(store, tiny_arch(), 1, 0, 4, 6, rng), std::invalid_argument);
  EXPECT_THROW(IpcBank<double>::create(store, tiny_arch(), 3, 2, 4, 6, rng), std::invalid_argument);
}
