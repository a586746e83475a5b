#include <gtest/gtest.h>

#include <cmath>
#include <optional>
#include <set>

#include "repdet/errors.hpp"
#include "repdet/fusion.hpp"
#include "repdet/model.hpp"
#include "repdet/ops.hpp"
#include "support.hpp"

using namespace repdet;
using repdet::testing::bind_from_store;

TEST(BuildModel, ParameterTotals) {
  const auto base = param_count(build_model(ModelVariant::Baseline, 3)).total;
  const auto improved = param_count(build_model(ModelVariant::Improved, 3)).total;
  EXPECT_EQ(base, 3011417u);
  EXPECT_EQ(improved, 2024662u);
  EXPECT_GE(base, 3'000'000u);
  EXPECT_LE(base, 3'200'000u);
  EXPECT_GE(improved, 2'000'000u);
  EXPECT_LE(improved, 2'200'000u);
  EXPECT_LE(static_cast<double>(improved) / base, 0.70);
}

TEST(BuildModel, AblationTotals) {
  EXPECT_EQ(param_count(build_model(ModelOptions{true, false, false}, 3)).total, 2375638u);
  EXPECT_EQ(param_count(build_model(ModelOptions{false, true, false}, 3)).total, 2434905u);
  EXPECT_EQ(param_count(build_model(ModelOptions{false, false, true}, 3)).total, 3236953u);
}

TEST(BuildModel, LayerCountsAreStable) {
  EXPECT_EQ(build_model(ModelVariant::Baseline, 3).layers.size(), 221u);
  EXPECT_EQ(build_model(ModelVariant::Improved, 3).layers.size(), 379u);
}

TEST(BuildModel, Errors) {
  EXPECT_THROW(build_model(ModelVariant::Baseline, 0), SpecError);
  EXPECT_THROW(parse_variant("medium"), SpecError);
  EXPECT_EQ(parse_variant("improved"), ModelVariant::Improved);
  EXPECT_EQ(to_string(parse_variant("baseline")), "baseline");
}

TEST(BuildModel, HeadShapesAt640) {
  for (auto v : {ModelVariant::Baseline, ModelVariant::Improved}) {
    const ModelGraph g = build_model(v, 3);
    const auto dims = infer_shapes(g);
    ASSERT_EQ(g.outputs.size(), 3u);
    EXPECT_EQ(dims[g.index_of(g.outputs[0])], (Dims{1, 67, 80, 80}));
    EXPECT_EQ(dims[g.index_of(g.outputs[1])], (Dims{1, 67, 40, 40}));
    EXPECT_EQ(dims[g.index_of(g.outputs[2])], (Dims{1, 67, 20, 20}));
  }
  const ModelGraph g80 = build_model(ModelVariant::Improved, 80);
  EXPECT_EQ(infer_shapes(g80)[g80.index_of(g80.outputs[2])], (Dims{1, 144, 20, 20}));
}

TEST(BuildModel, ShapeErrorsNameTheLayer) {
  const ModelGraph g = build_model(ModelVariant::Baseline, 3);
  try {
    infer_shapes(g, {1, 4, 640, 640});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("backbone.0"), std::string::npos) << e.what();
  }
  EXPECT_THROW(infer_shapes(g, {1, 3, 100, 100}), ShapeError);  // concat of 13x13 with 12x12
}

TEST(BuildModel, ImprovedPlacement) {
  const ModelGraph g = build_model(ModelVariant::Improved, 3);
  const auto blocks = count_blocks(g);
  EXPECT_EQ(blocks.at(BlockKind::C2fEMCM), 5);
  EXPECT_EQ(blocks.at(BlockKind::MSCA), 1);
  EXPECT_EQ(blocks.at(BlockKind::SegNextAttention), 1);
  EXPECT_EQ(blocks.at(BlockKind::RLDDHead), 1);
  EXPECT_EQ(blocks.count(BlockKind::BaselineHead), 0u);
  EXPECT_EQ(blocks.at(BlockKind::C2f), 3);
  // Two RepConv definitions, each applied at three levels.
  EXPECT_EQ(blocks.at(BlockKind::RepConv), 6);
  EXPECT_EQ(count_block_params(g).at(BlockKind::RepConv), 2);

  std::set<std::string> emcm;
  for (const auto& l : g.layers)
    if (!l.scopes.empty() && l.scopes.front().kind == BlockKind::C2fEMCM) emcm.insert(l.scopes.front().instance);
  EXPECT_EQ(emcm, (std::set<std::string>{"backbone.6", "backbone.8", "neck.2", "neck.8", "neck.11"}));

  // Attention sits directly on the SPPF output and feeds the neck.
  const Layer* att_in = g.find("backbone.10.proj_in.conv");
  ASSERT_NE(att_in, nullptr);
  EXPECT_EQ(att_in->inputs, (std::vector<std::string>{"backbone.9.cv2.act"}));
  EXPECT_EQ(g.find("neck.0")->inputs, (std::vector<std::string>{"backbone.10.add"}));

  int scales = 0;
  for (const auto& l : g.layers) scales += l.kind == LayerKind::Scale;
  EXPECT_EQ(scales, 3);
}

TEST(BuildModel, GraphIsTopological) {
  const ModelGraph g = build_model(ModelVariant::Improved, 3);
  std::set<std::string> seen;
  for (const auto& l : g.layers) {
    for (const auto& in : l.inputs) EXPECT_TRUE(seen.count(in)) << l.name << " <- " << in;
    EXPECT_TRUE(seen.insert(l.name).second) << "duplicate " << l.name;
  }
  ModelGraph bad = g;
  std::swap(bad.layers[1], bad.layers[2]);
  EXPECT_THROW(validate_graph(bad), SpecError);
}

TEST(ParamCount, SharedTensorsCountedOnce) {
  const ModelGraph g = build_model(ModelVariant::Improved, 3);
  const auto p = param_count(g);
  std::uint64_t per_layer = 0;
  for (auto v : p.per_layer) per_layer += v;
  EXPECT_EQ(per_layer, p.total);
  // The p4 and p5 applications of the shared stack add nothing.
  EXPECT_EQ(p.per_layer[g.index_of("head.p4.rep0.b3.conv")], 0u);
  EXPECT_EQ(p.per_layer[g.index_of("head.p3.rep0.b3.conv")], 64u * 64u * 9u);
}

TEST(FlopCount, ClosedForms) {
  const ModelGraph g = build_model(ModelVariant::Improved, 3);
  const auto f = flop_count(g);
  EXPECT_EQ(f.macs[g.index_of("backbone.4.cv1.conv")], 26214400u);  // 64*64*80*80
  EXPECT_EQ(f.elementwise[g.index_of("backbone.4.cv1.bn")], 64u * 80u * 80u);
  EXPECT_EQ(f.macs[g.index_of("backbone.4.cv1.bn")], 0u);
  const auto base = flop_count(build_model(ModelVariant::Baseline, 3)).total_macs;
  EXPECT_LT(f.total_macs, base);
  EXPECT_EQ(base, 4041907200u);
  EXPECT_EQ(f.total_macs, 2958003200u);
}

TEST(InitWeights, DeterministicAndBounded) {
  const ModelGraph g = build_model(ModelVariant::Improved, 3);
  const WeightStore a = init_weights(g, 42);
  EXPECT_EQ(a, init_weights(g, 42));
  EXPECT_NE(a, init_weights(g, 43));
  validate_weights(g, a);
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::Conv) {
      const auto& s = std::get<Conv2dSpec>(l.attrs);
      const double bound = std::sqrt(1.0 / (s.in_ch / s.groups * s.kh * s.kw));
      for (float v : a.at(l.param_key + ".w").values) ASSERT_LE(std::abs(v), bound) << l.name;
      if (s.has_bias) {
        for (float v : a.at(l.param_key + ".b").values) ASSERT_EQ(v, 0.0f);
      }
    } else if (l.kind == LayerKind::BatchNorm) {
      for (float v : a.at(l.param_key + ".gamma").values) ASSERT_EQ(v, 1.0f);
      for (float v : a.at(l.param_key + ".beta").values) ASSERT_EQ(v, 0.0f);
      for (float v : a.at(l.param_key + ".mean").values) ASSERT_EQ(v, 0.0f);
      for (float v : a.at(l.param_key + ".var").values) ASSERT_EQ(v, 1.0f);
    } else if (l.kind == LayerKind::Scale) {
      EXPECT_EQ(a.at(l.param_key).values, std::vector<float>{1.0f});
    }
  }
}

TEST(InitWeights, FreshModelFusesTrivially) {
  const ModelGraph g = build_model(ModelVariant::Improved, 3);
  const WeightStore w = init_weights(g, 1);
  const Model f = fuse_model_graph(g, w);
  const Tensor x = random_input({1, 3, 64, 64}, 2);
  const auto a = forward(g, w, x);
  const auto b = forward(f.graph, f.weights, x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(max_abs_diff(a[i], b[i]), 1e-4f);
}

TEST(ValidateWeights, NamesMissingAndMisshapedTensors) {
  const ModelGraph g = build_model(ModelVariant::Baseline, 3);
  WeightStore w = init_weights(g, 0);
  WeightStore missing = w;
  missing.erase("neck.5.cv2.bn.var");
  try {
    validate_weights(g, missing);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("neck.5.cv2.bn.var"), std::string::npos) << e.what();
  }
  WeightStore wrong = w;
  wrong.set("backbone.0.conv.w", {{16, 3, 3, 1}, std::vector<float>(144)});
  EXPECT_THROW(validate_weights(g, wrong), ValidationError);
  WeightStore extra = w;
  extra.set("stray", {{1}, {0.0f}});
  EXPECT_THROW(validate_weights(g, extra), ValidationError);
}

namespace {

// The same networks assembled from block values, weights bound from the store.
HeadMaps forward_by_blocks(const ModelOptions& o, const WeightStore& w, const Tensor& x) {
  auto conv = [&](const char* key, int in, int out, int k, int s) {
    ConvBlock b = ConvBlock::standard(in, out, k, s);
    bind_from_store(b, key, w);
    return b;
  };
  auto c2f = [&](const char* key, int in, int out, int n, bool emcm, bool shortcut) {
    C2fBlock b = C2fBlock::make(in, out, n, emcm ? C2fVariant::EMCM : C2fVariant::Standard, shortcut);
    bind_from_store(b, key, w);
    return b;
  };
  Tensor t = conv_block_forward(x, conv("backbone.0", 3, 16, 3, 2));
  t = conv_block_forward(t, conv("backbone.1", 16, 32, 3, 2));
  t = c2f_forward(t, c2f("backbone.2", 32, 32, 1, false, true));
  t = conv_block_forward(t, conv("backbone.3", 32, 64, 3, 2));
  const Tensor p3 = c2f_forward(t, c2f("backbone.4", 64, 64, 2, false, true));
  t = conv_block_forward(p3, conv("backbone.5", 64, 128, 3, 2));
  const Tensor p4 = c2f_forward(t, c2f("backbone.6", 128, 128, 2, o.emcm, true));
  t = conv_block_forward(p4, conv("backbone.7", 128, 256, 3, 2));
  t = c2f_forward(t, c2f("backbone.8", 256, 256, 1, o.emcm, true));
  SPPFBlock sppf = SPPFBlock::make(256, 256);
  bind_from_store(sppf, "backbone.9", w);
  Tensor p5 = sppf_forward(t, sppf);
  if (o.attention) {
    SegNextAttentionBlock att = SegNextAttentionBlock::make(256);
    bind_from_store(att, "backbone.10", w);
    p5 = segnext_attention_forward(p5, att);
  }
  auto cat = [](const Tensor& a, const Tensor& b) { return concat_channels(std::vector<Tensor>{a, b}); };
  const Tensor n1 = c2f_forward(cat(upsample_nearest2x(p5), p4), c2f("neck.2", 384, 128, 1, o.emcm, false));
  const Tensor o3 = c2f_forward(cat(upsample_nearest2x(n1), p3), c2f("neck.5", 192, 64, 1, false, false));
  const Tensor o4 = c2f_forward(cat(conv_block_forward(o3, conv("neck.6", 64, 64, 3, 2)), n1),
                                c2f("neck.8", 192, 128, 1, o.emcm, false));
  const Tensor o5 = c2f_forward(cat(conv_block_forward(o4, conv("neck.9", 128, 128, 3, 2)), p5),
                                c2f("neck.11", 384, 256, 1, o.emcm, false));
  HeadConfig cfg;
  if (o.rldd_head) {
    RLDDHead h = RLDDHead::make(cfg);
    bind_from_store(h, "head", w);
    return rldd_head_forward(o3, o4, o5, h);
  }
  BaselineHead h = BaselineHead::make(cfg);
  bind_from_store(h, "head", w);
  return baseline_head_forward(o3, o4, o5, h);
}

}  // namespace

class DualRoute : public ::testing::TestWithParam<ModelOptions> {};

TEST_P(DualRoute, GraphInterpreterMatchesBlockForwards) {
  const ModelGraph g = build_model(GetParam(), 3);
  WeightStore w = init_weights(g, 5);
  perturb_batch_norm(g, w, 6);
  const Tensor x = random_input({1, 3, 96, 64}, 7);
  const auto by_graph = forward(g, w, x);
  const HeadMaps by_blocks = forward_by_blocks(GetParam(), w, x);
  for (std::size_t i = 0; i < 3; ++i) {
    ASSERT_EQ(by_graph[i].dims(), by_blocks[i].dims());
    EXPECT_LT(max_abs_diff(by_graph[i], by_blocks[i]), 1e-5f) << "level " << i;
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, DualRoute,
                         ::testing::Values(ModelOptions{false, false, false}, ModelOptions{true, true, true},
                                           ModelOptions{false, true, true}));

TEST(Forward, ImprovedAt640) {
  const ModelGraph g = build_model(ModelVariant::Improved, 3);
  const WeightStore w = init_weights(g, 0);
  const auto out = forward(g, w, random_input(g.input, 1));
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].dims(), (Dims{1, 67, 80, 80}));
  EXPECT_EQ(out[1].dims(), (Dims{1, 67, 40, 40}));
  EXPECT_EQ(out[2].dims(), (Dims{1, 67, 20, 20}));
  for (const auto& m : out)
    for (float v : m.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Summary, RowsCoverEveryParameter) {
  const ModelGraph g = build_model(ModelVariant::Improved, 3);
  const auto rows = summarize(g, g.input);
  std::uint64_t params = 0, macs = 0;
  for (const auto& r : rows) {
    params += r.params;
    macs += r.macs;
  }
  EXPECT_EQ(params, param_count(g).total);
  EXPECT_EQ(macs, flop_count(g).total_macs);
  EXPECT_EQ(rows.front().name, "backbone.0");
  EXPECT_EQ(rows.front().out_shape, "(1,16,320,320)");
  EXPECT_EQ(rows.back().name, "head");
}
