#include <fmt/format.h>
#include <gtest/gtest.h>

#include <random>
#include <set>

#include "repdet/errors.hpp"
#include "repdet/fusion.hpp"
#include "repdet/lowering.hpp"
#include "repdet/ops.hpp"
#include "repdet/oracles.hpp"
#include "support.hpp"

using namespace repdet;
using repdet::testing::randomize_block;

namespace {

BatchNormParams exact_identity(int c) {
  BatchNormParams p = BatchNormParams::identity(c);
  p.eps = 0.0f;
  return p;
}

Model perturbed_model(ModelVariant v, std::uint64_t seed) {
  ModelGraph g = build_model(v, 3);
  WeightStore w = init_weights(g, seed);
  perturb_batch_norm(g, w, seed + 1);
  return {std::move(g), std::move(w)};
}

}  // namespace

TEST(FuseConvBn, IdentityLeavesConvUnchanged) {
  std::mt19937_64 rng(1);
  const Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng);
  const std::vector<float> b = {0.1f, -0.2f, 0.3f, 0.0f};
  const FusedConv f = fuse_conv_bn(w, b, exact_identity(4));
  EXPECT_EQ(f.weight, w);
  EXPECT_EQ(f.bias, b);
}

TEST(FuseConvBn, GammaTwoDoublesWeights) {
  std::mt19937_64 rng(2);
  const Tensor w = oracle::random_tensor({2, 2, 1, 1}, rng);
  BatchNormParams bn = exact_identity(2);
  bn.gamma = {2.0f, 2.0f};
  const FusedConv f = fuse_conv_bn(w, {}, bn);
  EXPECT_EQ(f.weight, scale(w, 2.0f));
  EXPECT_EQ(f.bias, (std::vector<float>{0.0f, 0.0f}));
}

TEST(FuseConvBn, ForwardEquivalence) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    ConvBlock blk = ConvBlock::make(Conv2dSpec::square(5, 7, 3, 1 + i % 2, 1, i % 3 == 0), true, Activation::None);
    randomize_block(blk, rng);
    const FusedConv f = fuse_conv_bn(blk.weight, blk.bias, *blk.bn);
    Conv2dSpec spec = blk.spec;
    spec.has_bias = true;
    const Tensor x = oracle::random_tensor({1, 5, 9, 8}, rng);
    const Tensor ref = batch_norm_inference(conv2d(x, blk.spec, blk.weight, blk.bias), *blk.bn);
    EXPECT_LT(max_abs_diff(conv2d(x, spec, f.weight, f.bias), ref), 1e-5f);
  }
}

TEST(FuseConvBn, NonPositiveDenominatorIsNumericError) {
  BatchNormParams bn = exact_identity(1);
  bn.running_var = {0.0f};
  EXPECT_THROW(fuse_conv_bn(Tensor({1, 1, 1, 1}, 1.0f), {}, bn), NumericError);
}

TEST(Lowering, OneByOneGoesToCentre) {
  const Tensor k = lower_1x1_to_3x3(Tensor({1, 1, 1, 1}, {5.0f}));
  for (int u = 0; u < 3; ++u)
    for (int v = 0; v < 3; ++v) EXPECT_EQ(k.at(0, 0, u, v), (u == 1 && v == 1) ? 5.0f : 0.0f);
  EXPECT_THROW(lower_1x1_to_3x3(Tensor({1, 1, 3, 3})), UnsupportedError);
}

TEST(Lowering, AvgPoolDiagonal) {
  const Tensor k = lower_avg_pool_to_3x3(2);
  EXPECT_EQ(k.dims(), (Dims{2, 2, 3, 3}));
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 2; ++i)
      for (int u = 0; u < 3; ++u)
        for (int v = 0; v < 3; ++v) EXPECT_EQ(k.at(o, i, u, v), o == i ? 1.0f / 9.0f : 0.0f);
  EXPECT_THROW(lower_avg_pool_to_3x3(2, 2), UnsupportedError);
  EXPECT_THROW(lower_avg_pool_to_3x3(2, 1, 2), UnsupportedError);
}

TEST(Lowering, AvgKernelMatchesPool) {
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor({2, 5, 11, 6}, rng);
  EXPECT_LT(max_abs_diff(conv2d(x, Conv2dSpec::square(5, 5, 3), lower_avg_pool_to_3x3(5)),
                         pool2d(x, {PoolMode::Avg, 3, 1, 1})),
            1e-6f);
}

TEST(FuseRepConv, OnlyThreeByThreeBranch) {
  std::mt19937_64 rng(5);
  RepConvBlock b = RepConvBlock::make(3, 2);  // no avg branch: channels differ
  b.branches->conv3x3.weight = oracle::random_tensor({2, 3, 3, 3}, rng);
  b.branches->conv3x3.bn = exact_identity(2);
  b.branches->conv1x1.bn = exact_identity(2);
  const FusedConv f = fuse_repconv(b);
  EXPECT_EQ(f.weight, b.branches->conv3x3.weight);
  EXPECT_EQ(f.bias, (std::vector<float>{0.0f, 0.0f}));
}

TEST(FuseRepConv, ZeroWeightsLeaveAvgDiagonal) {
  RepConvBlock b = RepConvBlock::make(3, 3);
  b.branches->conv3x3.bn = exact_identity(3);
  b.branches->conv1x1.bn = exact_identity(3);
  b.branches->avg_bn = exact_identity(3);
  EXPECT_EQ(fuse_repconv(b).weight, lower_avg_pool_to_3x3(3));
}

TEST(FuseRepConv, InconsistentBranchesAndWrongMode) {
  RepConvBlock b = RepConvBlock::make(3, 3);
  b.branches->conv1x1.spec = Conv2dSpec::square(3, 3, 3);
  b.branches->conv1x1.weight = Tensor({3, 3, 3, 3});
  EXPECT_THROW(fuse_repconv(b), FusionError);
  RepConvBlock d = to_deploy(RepConvBlock::make(3, 3));
  EXPECT_THROW(fuse_repconv(d), StateError);
  EXPECT_EQ(to_deploy(d), d);
}

TEST(FuseRepConv, DeployHasFewerParams) {
  std::mt19937_64 rng(6);
  const RepConvBlock b = oracle::random_repconv(rng, 64, 64, 1);
  EXPECT_LT(block_param_count(to_deploy(b)), block_param_count(b));
}

TEST(FuseGraph, BaselineOnlyFoldsBatchNorm) {
  const Model m = perturbed_model(ModelVariant::Baseline, 7);
  const Model f = fuse_model_graph(m.graph, m.weights);
  std::vector<std::string> expect;
  for (const auto& l : m.graph.layers)
    if (l.kind != LayerKind::BatchNorm) expect.push_back(l.name);
  std::vector<std::string> got;
  for (const auto& l : f.graph.layers) got.push_back(l.name);
  EXPECT_EQ(got, expect);
  for (const auto& l : f.graph.layers) {
    if (l.kind == LayerKind::Conv) {
      EXPECT_TRUE(std::get<Conv2dSpec>(l.attrs).has_bias) << l.name;
    }
  }
  EXPECT_EQ(f.graph.form, GraphForm::Deploy);
  const Tensor x = random_input({1, 3, 96, 96}, 8);
  const auto a = forward(m.graph, m.weights, x);
  const auto b = forward(f.graph, f.weights, x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(max_abs_diff(a[i], b[i]), 1e-3f);
}

TEST(FuseGraph, ImprovedStructure) {
  const Model m = perturbed_model(ModelVariant::Improved, 9);
  EXPECT_GT(count_repconv_branch_layers(m.graph), 0u);
  const Model f = fuse_model_graph(m.graph, m.weights);
  EXPECT_EQ(count_repconv_branch_layers(f.graph), 0u);
  EXPECT_LT(f.graph.layers.size(), m.graph.layers.size());
  for (const auto& l : f.graph.layers) {
    EXPECT_NE(l.kind, LayerKind::AvgPool) << l.name;
    EXPECT_NE(l.kind, LayerKind::BatchNorm) << l.name;
  }
  EXPECT_LE(param_count(f.graph).total, param_count(m.graph).total);
  EXPECT_LE(flop_count(f.graph).total_macs, flop_count(m.graph).total_macs);
  validate_weights(f.graph, f.weights);
}

TEST(FuseGraph, SharedRepConvKernelsStayShared) {
  const Model m = perturbed_model(ModelVariant::Improved, 10);
  const Model f = fuse_model_graph(m.graph, m.weights);
  for (int r = 0; r < 2; ++r) {
    std::set<std::string> keys;
    for (const auto& lv : {"p3", "p4", "p5"}) {
      const Layer* l = f.graph.find(fmt::format("head.{}.rep{}.fused.conv", lv, r));
      ASSERT_NE(l, nullptr);
      keys.insert(l->param_key);
    }
    EXPECT_EQ(keys, (std::set<std::string>{fmt::format("head.rep{}.fused.conv", r)}));
  }
}

TEST(FuseGraph, Idempotent) {
  const Model m = perturbed_model(ModelVariant::Improved, 11);
  const Model once = fuse_model_graph(m.graph, m.weights);
  const Model twice = fuse_model_graph(once.graph, once.weights);
  EXPECT_EQ(twice.graph, once.graph);
  EXPECT_EQ(twice.weights, once.weights);
}

TEST(FuseGraph, DoesNotMutateInputs) {
  const Model m = perturbed_model(ModelVariant::Improved, 12);
  const Model copy = m;
  (void)fuse_model_graph(m.graph, m.weights);
  EXPECT_EQ(m, copy);
}

TEST(FuseGraph, ImprovedEquivalenceAtReducedResolution) {
  const Model m = perturbed_model(ModelVariant::Improved, 13);
  const Model f = fuse_model_graph(m.graph, m.weights);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Tensor x = random_input({1, 3, 160, 160}, 100 + s);
    const auto a = forward(m.graph, m.weights, x);
    const auto b = forward(f.graph, f.weights, x);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(max_abs_diff(a[i], b[i]), 1e-3f);
  }
}

TEST(FuseGraph, MatchesLoweringTheDeployBlock) {
  std::mt19937_64 rng(14);
  RepConvBlock blk = oracle::random_repconv(rng, 8, 8, 1);
  auto graph_of = [](const RepConvBlock& b) {
    GraphBuilder gb;
    Layer in;
    in.name = "input";
    const std::string x = gb.add(std::move(in));
    const std::string y = lower(gb, b, "r", "r", x);
    ModelGraph g;
    g.layers = gb.take_layers();
    g.outputs = {y, y, y};
    return g;
  };
  WeightStore w;
  visit_params(blk, "r", [&](const std::string& name, const ParamShape& shape, std::span<const float> v, ParamRole) {
    w.set(name, {shape, {v.begin(), v.end()}});
  });
  const Model fused = fuse_model_graph(graph_of(blk), w);
  ModelGraph expect = graph_of(to_deploy(blk));
  expect.form = GraphForm::Deploy;
  EXPECT_EQ(fused.graph, expect);
}

TEST(FuseGraph, MissingWeightsAreRejected) {
  Model m = perturbed_model(ModelVariant::Improved, 15);
  m.weights.erase("head.rep0.b1.bn.gamma");
  EXPECT_THROW(fuse_model_graph(m.graph, m.weights), ValidationError);
}
