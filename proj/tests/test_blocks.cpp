#include <gtest/gtest.h>

#include <random>

#include "repdet/block_params.hpp"
#include "repdet/blocks.hpp"
#include "repdet/errors.hpp"
#include "repdet/fusion.hpp"
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

// conv -> bn -> act spelled out with tensor-core ops.
Tensor compose(const Tensor& x, const ConvBlock& b) {
  Tensor y = conv2d(x, b.spec, b.weight, b.bias);
  if (b.bn) y = batch_norm_inference(y, *b.bn);
  return b.act == Activation::SiLU ? silu(y) : y;
}

Tensor compose_stage(const Tensor& x, const BottleneckStage& s);

Tensor compose_emcm(const Tensor& x, const EMCMBlock& b) {
  const int q = x.c() / 4;
  const Tensor kept = slice_channels(x, 0, 2 * q);
  const Tensor a = compose(slice_channels(x, 2 * q, q), b.path3);
  const Tensor c = compose(slice_channels(x, 3 * q, q), b.path5);
  return compose(concat_channels(std::vector<Tensor>{kept, a, c}), b.fuse);
}

Tensor compose_stage(const Tensor& x, const BottleneckStage& s) {
  if (const auto* c = std::get_if<ConvBlock>(&s)) return compose(x, *c);
  return compose_emcm(x, std::get<EMCMBlock>(s));
}

}  // namespace

TEST(ConvBlock, StandardParamCount) {
  EXPECT_EQ(block_param_count(ConvBlock::standard(3, 16, 3, 2)), 464u);
}

TEST(ConvBlock, IdentityConvIdentityBnNoAct) {
  ConvBlock b = ConvBlock::make(Conv2dSpec::square(3, 3, 1), true, Activation::None);
  for (int c = 0; c < 3; ++c) b.weight.at(c, c, 0, 0) = 1.0f;
  b.bn = exact_identity(3);
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({1, 3, 5, 5}, rng);
  EXPECT_EQ(conv_block_forward(x, b), x);
}

TEST(ConvBlock, ZeroWeightsGiveSiluOfBeta) {
  ConvBlock b = ConvBlock::standard(2, 2, 3);
  b.bn->beta = {0.5f, -2.0f};
  std::mt19937_64 rng(2);
  const Tensor y = conv_block_forward(oracle::random_tensor({1, 2, 4, 4}, rng), b);
  const Tensor expect = silu(Tensor({1, 1, 1, 2}, {0.5f, -2.0f}));
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) EXPECT_FLOAT_EQ(y.at(0, c, i, j), expect.at(0, 0, 0, c));
}

TEST(ConvBlock, MatchesComposition) {
  std::mt19937_64 rng(3);
  ConvBlock b = ConvBlock::standard(4, 6, 3, 2);
  randomize_block(b, rng);
  const Tensor x = oracle::random_tensor({1, 4, 9, 9}, rng);
  EXPECT_EQ(conv_block_forward(x, b), compose(x, b));
}

TEST(C2f, ZeroBottleneckPassesShortcut) {
  Bottleneck bn{ConvBlock::standard(8, 8, 3), ConvBlock::standard(8, 8, 3), true};
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor({1, 8, 6, 6}, rng);
  EXPECT_EQ(bottleneck_forward(x, bn), x);
}

TEST(C2f, ShapePreserved) {
  std::mt19937_64 rng(5);
  C2fBlock b = C2fBlock::make(64, 64, 1, C2fVariant::Standard, true);
  randomize_block(b, rng);
  EXPECT_EQ(c2f_forward(oracle::random_tensor({1, 64, 80, 80}, rng), b).dims(), (Dims{1, 64, 80, 80}));
}

TEST(C2f, MatchesComposition) {
  std::mt19937_64 rng(6);
  for (auto variant : {C2fVariant::Standard, C2fVariant::EMCM}) {
    C2fBlock b = C2fBlock::make(16, 16, 2, variant, true);
    randomize_block(b, rng);
    const Tensor x = oracle::random_tensor({1, 16, 8, 8}, rng);
    Tensor t = compose(x, b.cv1);
    std::vector<Tensor> ys = {slice_channels(t, 0, 8), slice_channels(t, 8, 8)};
    for (const auto& bt : b.bottlenecks) {
      Tensor y = compose_stage(compose_stage(ys.back(), bt.first), bt.second);
      ys.push_back(add(ys.back(), y));
    }
    const Tensor ref = compose(concat_channels(ys), b.cv2);
    EXPECT_LT(max_abs_diff(c2f_forward(x, b), ref), 1e-5f);
  }
}

TEST(C2f, EmcmVariantHasFewerParams) {
  const auto std_count = block_param_count(C2fBlock::make(128, 128, 2, C2fVariant::Standard, true));
  const auto emcm_count = block_param_count(C2fBlock::make(128, 128, 2, C2fVariant::EMCM, true));
  EXPECT_LT(emcm_count, std_count);
  // Closed form: cv1 128*128 + 2*128, cv2 256*128 + 2*128, per bottleneck
  // two EMCM(64): 2 * (16*16*9 + 32 + 16*16*25 + 32 + 64*64 + 128).
  EXPECT_EQ(std_count, 197632u);
  EXPECT_EQ(emcm_count, 16384u + 256u + 32768u + 256u + 2u * 2u * (2304u + 32u + 6400u + 32u + 4096u + 128u));
}

TEST(C2f, ConstructionErrors) {
  EXPECT_THROW(C2fBlock::make(16, 15, 1, C2fVariant::Standard, true), SpecError);
  EXPECT_THROW(C2fBlock::make(16, 12, 1, C2fVariant::EMCM, true), SpecError);  // hidden 6
  EXPECT_NO_THROW(C2fBlock::make(16, 12, 1, C2fVariant::Standard, true));
}

TEST(SPPF, ConstantInputIdentityStyleConvs) {
  SPPFBlock b = SPPFBlock::make(4, 4);
  for (auto* c : {&b.cv1, &b.cv2}) {
    c->act = Activation::None;
    c->bn = exact_identity(c->spec.out_ch);
  }
  // cv1 averages channel pairs; cv2 averages the four pooled maps.
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 4; ++i) b.cv1.weight.at(o, i, 0, 0) = 0.25f;
  for (int o = 0; o < 4; ++o)
    for (int i = 0; i < 8; ++i) b.cv2.weight.at(o, i, 0, 0) = 0.125f;
  const Tensor y = sppf_forward(Tensor({1, 4, 7, 7}, 2.0f), b);
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 2.0f);
}

TEST(SPPF, ShapeAndComposition) {
  std::mt19937_64 rng(7);
  SPPFBlock big = SPPFBlock::make(256, 256);
  randomize_block(big, rng);
  EXPECT_EQ(sppf_forward(oracle::random_tensor({1, 256, 20, 20}, rng), big).dims(), (Dims{1, 256, 20, 20}));

  SPPFBlock b = SPPFBlock::make(8, 8);
  randomize_block(b, rng);
  const Tensor x = oracle::random_tensor({1, 8, 9, 9}, rng);
  std::vector<Tensor> maps = {compose(x, b.cv1)};
  for (int i = 0; i < 3; ++i) maps.push_back(pool2d(maps.back(), {PoolMode::Max, 5, 1, 2}));
  EXPECT_LT(max_abs_diff(sppf_forward(x, b), compose(concat_channels(maps), b.cv2)), 1e-6f);
}

TEST(RepConv, AvgBranchIsolation) {
  RepConvBlock b = RepConvBlock::make(3, 3);
  b.branches->conv3x3.bn = exact_identity(3);
  b.branches->conv1x1.bn = exact_identity(3);
  b.branches->avg_bn = exact_identity(3);
  std::mt19937_64 rng(8);
  const Tensor x = oracle::random_tensor({1, 3, 6, 6}, rng);
  EXPECT_LT(max_abs_diff(repconv_forward(x, b), silu(pool2d(x, {PoolMode::Avg, 3, 1, 1}))), 1e-7f);
}

TEST(RepConv, ZeroInputZeroBeta) {
  std::mt19937_64 rng(9);
  RepConvBlock b = oracle::random_repconv(rng, 4, 4, 1);
  for (auto* bn : {&*b.branches->conv3x3.bn, &*b.branches->conv1x1.bn, &*b.branches->avg_bn}) {
    std::fill(bn->beta.begin(), bn->beta.end(), 0.0f);
    std::fill(bn->running_mean.begin(), bn->running_mean.end(), 0.0f);
  }
  const Tensor y = repconv_forward(Tensor({1, 4, 5, 5}), b);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(RepConv, AvgBranchOnlyAtStrideOneWithMatchingChannels) {
  EXPECT_TRUE(RepConvBlock::make(8, 8, 1).branches->avg_bn.has_value());
  EXPECT_FALSE(RepConvBlock::make(8, 8, 2).branches->avg_bn.has_value());
  EXPECT_FALSE(RepConvBlock::make(8, 4, 1).branches->avg_bn.has_value());
  std::mt19937_64 rng(10);
  const RepConvBlock s2 = oracle::random_repconv(rng, 4, 4, 2);
  EXPECT_EQ(repconv_forward(oracle::random_tensor({1, 4, 8, 8}, rng), s2).dims(), (Dims{1, 4, 4, 4}));
}

TEST(RepConv, TrainEqualsDeployOnRandomBlocks) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    const int in = 1 + static_cast<int>(rng() % 8);
    const int out = i % 3 ? in : 1 + static_cast<int>(rng() % 8);
    const int stride = i % 5 == 0 ? 2 : 1;
    const RepConvBlock b = oracle::random_repconv(rng, in, out, stride);
    const Tensor x = oracle::random_tensor({1, in, 6 + static_cast<int>(rng() % 10), 6 + static_cast<int>(rng() % 10)}, rng);
    EXPECT_LT(max_abs_diff(repconv_forward(x, b), repconv_forward(x, to_deploy(b))), 1e-4f) << "block " << i;
  }
}

TEST(RepConv, DeployWithoutConvIsStateError) {
  RepConvBlock b = RepConvBlock::make(2, 2);
  b.mode = RepMode::Deploy;
  EXPECT_THROW(repconv_forward(Tensor({1, 2, 4, 4}), b), StateError);
}

TEST(EMCM, ZeroPathsReproduceKeptHalf) {
  EMCMBlock b = EMCMBlock::make(8, 4);
  b.fuse.act = Activation::None;
  b.fuse.bn = exact_identity(4);
  for (int o = 0; o < 4; ++o) b.fuse.weight.at(o, o, 0, 0) = 1.0f;
  std::mt19937_64 rng(12);
  const Tensor x = oracle::random_tensor({1, 8, 5, 5}, rng);
  EXPECT_EQ(emcm_forward(x, b), slice_channels(x, 0, 4));
}

TEST(EMCM, ShapeAndComposition) {
  std::mt19937_64 rng(13);
  EMCMBlock big = EMCMBlock::make(64, 64);
  randomize_block(big, rng);
  EXPECT_EQ(emcm_forward(oracle::random_tensor({1, 64, 40, 40}, rng), big).dims(), (Dims{1, 64, 40, 40}));
  EMCMBlock b = EMCMBlock::make(16, 12);
  randomize_block(b, rng);
  const Tensor x = oracle::random_tensor({1, 16, 7, 7}, rng);
  EXPECT_LT(max_abs_diff(emcm_forward(x, b), compose_emcm(x, b)), 1e-5f);
}

TEST(EMCM, ChannelDivisibility) {
  EXPECT_THROW(EMCMBlock::make(6, 6), SpecError);
  const EMCMBlock b = EMCMBlock::make(12, 12);
  EXPECT_EQ(b.keep_ch() + 2 * b.path_ch(), 12);
  EXPECT_THROW(emcm_forward(Tensor({1, 8, 4, 4}), b), ShapeError);
}

TEST(MSCA, UnitAttentionIsIdentity) {
  MSCABlock b = MSCABlock::make(4);
  std::mt19937_64 rng(14);
  randomize_block(b, rng);
  std::fill(b.mix.weight.data().begin(), b.mix.weight.data().end(), 0.0f);
  std::fill(b.mix.bias.begin(), b.mix.bias.end(), 1.0f);
  const Tensor x = oracle::random_tensor({1, 4, 9, 9}, rng);
  EXPECT_EQ(msca_forward(x, b), x);
  std::fill(b.mix.bias.begin(), b.mix.bias.end(), 0.0f);
  const Tensor zeros = msca_forward(x, b);
  for (float v : zeros.data()) EXPECT_EQ(v, 0.0f);
}

TEST(MSCA, StructureAndFourPathOracle) {
  MSCABlock b = MSCABlock::make(6);
  EXPECT_EQ(b.base.spec.groups, 6);
  EXPECT_EQ(b.base.spec.kh, 5);
  for (std::size_t i = 0; i < 3; ++i) {
    const int len = kStripLengths[i];
    EXPECT_EQ(b.strips[i].horizontal.spec.kw, len);
    EXPECT_EQ(b.strips[i].horizontal.spec.pad_w, len / 2);
    EXPECT_EQ(b.strips[i].vertical.spec.kh, len);
    EXPECT_EQ(b.strips[i].vertical.spec.pad_h, len / 2);
    EXPECT_EQ(b.strips[i].vertical.spec.groups, 6);
  }
  std::mt19937_64 rng(15);
  randomize_block(b, rng);
  const Tensor x = oracle::random_tensor({1, 6, 12, 10}, rng);
  const Tensor u = oracle::conv2d(x, b.base.spec, b.base.weight, b.base.bias);
  Tensor s = u;
  for (const auto& p : b.strips) {
    const Tensor h = oracle::conv2d(u, p.horizontal.spec, p.horizontal.weight, p.horizontal.bias);
    s = add(s, oracle::conv2d(h, p.vertical.spec, p.vertical.weight, p.vertical.bias));
  }
  const Tensor att = oracle::conv2d(s, b.mix.spec, b.mix.weight, b.mix.bias);
  EXPECT_LT(max_abs_diff(msca_forward(x, b), mul(att, x)), 1e-5f);
  EXPECT_EQ(msca_forward(x, b).dims(), x.dims());
}

TEST(SegNextAttention, ResidualAroundMsca) {
  SegNextAttentionBlock b = SegNextAttentionBlock::make(8);
  std::mt19937_64 rng(16);
  randomize_block(b, rng);
  const Tensor x = oracle::random_tensor({1, 8, 6, 6}, rng);
  const Tensor inner = compose(msca_forward(gelu(compose(x, b.proj_in)), b.msca), b.proj_out);
  EXPECT_LT(max_abs_diff(segnext_attention_forward(x, b), add(inner, x)), 1e-6f);
  // Frozen counts for the 256-channel instance used after SPPF.
  EXPECT_EQ(block_param_count(MSCABlock::make(256)), 93952u);
  EXPECT_EQ(block_param_count(SegNextAttentionBlock::make(256)), 225536u);
}

namespace {

std::array<Tensor, 3> head_inputs(std::mt19937_64& rng, int size = 640) {
  return {oracle::random_tensor({1, 64, size / 8, size / 8}, rng), oracle::random_tensor({1, 128, size / 16, size / 16}, rng),
          oracle::random_tensor({1, 256, size / 32, size / 32}, rng)};
}

}  // namespace

TEST(BaselineHead, ShapesAndZeroLogits) {
  std::mt19937_64 rng(17);
  BaselineHead h = BaselineHead::make(HeadConfig{});
  randomize_block(h, rng);
  for (auto& lv : h.levels) {
    std::fill(lv.box_out.weight.data().begin(), lv.box_out.weight.data().end(), 0.0f);
    std::fill(lv.box_out.bias.begin(), lv.box_out.bias.end(), 0.0f);
    std::fill(lv.cls_out.weight.data().begin(), lv.cls_out.weight.data().end(), 0.0f);
    std::fill(lv.cls_out.bias.begin(), lv.cls_out.bias.end(), 0.0f);
  }
  const auto in = head_inputs(rng);
  const HeadMaps out = baseline_head_forward(in[0], in[1], in[2], h);
  EXPECT_EQ(out[0].dims(), (Dims{1, 67, 80, 80}));
  EXPECT_EQ(out[1].dims(), (Dims{1, 67, 40, 40}));
  EXPECT_EQ(out[2].dims(), (Dims{1, 67, 20, 20}));
  for (const auto& m : out)
    for (float v : m.data()) ASSERT_EQ(v, 0.0f);
}

TEST(BaselineHead, LevelsAreIndependent) {
  std::mt19937_64 rng(18);
  BaselineHead h = BaselineHead::make(HeadConfig{});
  randomize_block(h, rng);
  const auto in = head_inputs(rng, 128);
  const HeadMaps a = baseline_head_forward(in[0], in[1], in[2], h);
  randomize_block(h.levels[2].box0, rng);
  randomize_block(h.levels[2].cls1, rng);
  const HeadMaps b = baseline_head_forward(in[0], in[1], in[2], h);
  EXPECT_EQ(a[0], b[0]);
  EXPECT_EQ(a[1], b[1]);
  EXPECT_NE(a[2], b[2]);
}

TEST(RLDDHead, ParamCountsAgainstBaseline) {
  const auto rldd = block_param_count(RLDDHead::make(HeadConfig{}));
  const auto base = block_param_count(BaselineHead::make(HeadConfig{}));
  EXPECT_EQ(rldd, 116102u);
  EXPECT_EQ(base, 751881u);
  EXPECT_LT(rldd, base);
  // The lighter head alone saves a little over 0.6M parameters.
  EXPECT_GT(base - rldd, 600000u);
}

TEST(RLDDHead, UnitScalesAreIdentity) {
  std::mt19937_64 rng(19);
  RLDDHead h = RLDDHead::make(HeadConfig{});
  randomize_block(h, rng);
  h.scales = {1.0f, 1.0f, 1.0f};
  const auto in = head_inputs(rng, 64);
  const HeadMaps out = rldd_head_forward(in[0], in[1], in[2], h);
  // Box part equals the shared box conv applied to the shared stack output.
  for (std::size_t lv = 0; lv < 3; ++lv) {
    Tensor f = compose(in[lv], h.stems[lv]);
    for (const auto& r : h.stack) f = repconv_forward(f, r);
    const Tensor box = compose(f, h.box_out);
    const Tensor cls = compose(f, h.cls_out);
    EXPECT_EQ(out[lv], concat_channels(std::vector<Tensor>{box, cls}));
  }
  h.scales = {2.0f, 1.0f, 1.0f};
  const HeadMaps scaled = rldd_head_forward(in[0], in[1], in[2], h);
  EXPECT_EQ(slice_channels(scaled[0], 0, 64), scale(slice_channels(out[0], 0, 64), 2.0f));
  EXPECT_EQ(slice_channels(scaled[0], 64, 3), slice_channels(out[0], 64, 3));
  EXPECT_EQ(scaled[1], out[1]);
}

TEST(RLDDHead, DeployFormSharesFusedKernelsAndMatches) {
  std::mt19937_64 rng(20);
  RLDDHead h = RLDDHead::make(HeadConfig{});
  randomize_block(h, rng);
  const RLDDHead d = to_deploy(h);
  for (const auto& r : d.stack) {
    EXPECT_EQ(r.mode, RepMode::Deploy);
    EXPECT_FALSE(r.branches.has_value());
  }
  const auto in = head_inputs(rng, 64);
  const HeadMaps a = rldd_head_forward(in[0], in[1], in[2], h);
  const HeadMaps b = rldd_head_forward(in[0], in[1], in[2], d);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(max_abs_diff(a[i], b[i]), 1e-4f);
}

TEST(RLDDHead, MixedModesAreStateError) {
  std::mt19937_64 rng(21);
  RLDDHead h = RLDDHead::make(HeadConfig{});
  randomize_block(h, rng);
  h.stack[1] = to_deploy(h.stack[1]);
  const auto in = head_inputs(rng, 64);
  EXPECT_THROW(rldd_head_forward(in[0], in[1], in[2], h), StateError);
}

TEST(HeadConfig, OutputChannels) {
  HeadConfig cfg;
  EXPECT_EQ(cfg.outputs_per_level(), 67);
  cfg.nc = 80;
  EXPECT_EQ(cfg.outputs_per_level(), 144);
}
