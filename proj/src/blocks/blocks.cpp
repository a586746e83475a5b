#include "repdet/blocks.hpp"

#include <fmt/format.h>

#include "repdet/errors.hpp"
#include "repdet/ops.hpp"

namespace repdet {

ConvBlock ConvBlock::make(const Conv2dSpec& spec, bool with_bn, Activation act) {
  spec.validate();
  ConvBlock b;
  b.spec = spec;
  b.spec.has_bias = spec.has_bias && !with_bn;
  b.weight = Tensor(spec.weight_dims());
  if (b.spec.has_bias) b.bias.assign(static_cast<std::size_t>(spec.out_ch), 0.0f);
  if (with_bn) b.bn = BatchNormParams::identity(spec.out_ch);
  b.act = act;
  return b;
}

ConvBlock ConvBlock::standard(int in_ch, int out_ch, int k, int stride) {
  return make(Conv2dSpec::square(in_ch, out_ch, k, stride), true, Activation::SiLU);
}

ConvBlock ConvBlock::plain(const Conv2dSpec& spec) {
  Conv2dSpec s = spec;
  s.has_bias = true;
  return make(s, false, Activation::None);
}

void ConvBlock::validate() const {
  spec.validate();
  if (weight.dims() != spec.weight_dims()) {
    throw ShapeError(fmt::format("conv block weight {} does not match spec {}",
                                 to_string(weight.dims()), to_string(spec.weight_dims())));
  }
  if (spec.has_bias && bn) throw SpecError("conv block with BN must not carry a conv bias");
  if (spec.has_bias != !bias.empty()) throw SpecError("conv block bias presence disagrees with spec");
}

Tensor conv_block_forward(const Tensor& x, const ConvBlock& blk) {
  Tensor y = conv2d(x, blk.spec, blk.weight, blk.bias);
  if (blk.bn) y = batch_norm_inference(y, *blk.bn);
  if (blk.act == Activation::SiLU) y = silu(y);
  return y;
}

// ---------------------------------------------------------------------------
// RepConv

RepConvBlock RepConvBlock::make(int in_ch, int out_ch, int stride) {
  RepConvBlock b;
  b.in_ch = in_ch;
  b.out_ch = out_ch;
  b.stride = stride;
  b.mode = RepMode::Train;
  RepBranches br;
  br.conv3x3 = ConvBlock::make(Conv2dSpec::square(in_ch, out_ch, 3, stride), true, Activation::None);
  br.conv1x1 = ConvBlock::make(Conv2dSpec::square(in_ch, out_ch, 1, stride), true, Activation::None);
  if (stride == 1 && in_ch == out_ch) br.avg_bn = BatchNormParams::identity(out_ch);
  b.branches = std::move(br);
  return b;
}

Tensor repconv_forward(const Tensor& x, const RepConvBlock& blk) {
  if (blk.mode == RepMode::Deploy) {
    if (!blk.deploy_conv) throw StateError("repconv: deploy-form forward without a fused conv");
    return silu(conv_block_forward(x, *blk.deploy_conv));
  }
  if (!blk.branches) throw StateError("repconv: train-form forward without branches");
  const RepBranches& br = *blk.branches;
  Tensor sum = add(conv_block_forward(x, br.conv3x3), conv_block_forward(x, br.conv1x1));
  if (br.avg_bn && blk.stride == 1) {
    const Tensor pooled = pool2d(x, {PoolMode::Avg, 3, 1, 1});
    sum = add(sum, batch_norm_inference(pooled, *br.avg_bn));
  }
  return silu(sum);
}

// ---------------------------------------------------------------------------
// EMCM / bottlenecks / C2f

EMCMBlock EMCMBlock::make(int in_ch, int out_ch) {
  if (in_ch <= 0 || in_ch % 4 != 0) {
    throw SpecError(fmt::format("EMCM input channels {} not divisible by 4", in_ch));
  }
  EMCMBlock b;
  b.in_ch = in_ch;
  b.out_ch = out_ch;
  const int q = in_ch / 4;
  b.path3 = ConvBlock::standard(q, q, 3);
  b.path5 = ConvBlock::standard(q, q, 5);
  b.fuse = ConvBlock::standard(in_ch, out_ch, 1);
  return b;
}

Tensor emcm_forward(const Tensor& x, const EMCMBlock& blk) {
  if (blk.in_ch % 4 != 0) {
    throw SpecError(fmt::format("EMCM input channels {} not divisible by 4", blk.in_ch));
  }
  if (x.c() != blk.in_ch) {
    throw ShapeError(fmt::format("EMCM: input axis c is {}, expected {}", x.c(), blk.in_ch));
  }
  const std::array<int, 3> sizes = {blk.keep_ch(), blk.path_ch(), blk.path_ch()};
  auto parts = split_channels(x, sizes);
  const std::array<Tensor, 3> merged = {std::move(parts[0]), conv_block_forward(parts[1], blk.path3),
                                        conv_block_forward(parts[2], blk.path5)};
  return conv_block_forward(concat_channels(merged), blk.fuse);
}

namespace {

Tensor stage_forward(const Tensor& x, const BottleneckStage& stage) {
  return std::visit(
      [&](const auto& s) -> Tensor {
        if constexpr (std::is_same_v<std::decay_t<decltype(s)>, ConvBlock>) {
          return conv_block_forward(x, s);
        } else {
          return emcm_forward(x, s);
        }
      },
      stage);
}

int stage_in(const BottleneckStage& s) {
  return std::visit(
      [](const auto& b) {
        if constexpr (std::is_same_v<std::decay_t<decltype(b)>, ConvBlock>) {
          return b.spec.in_ch;
        } else {
          return b.in_ch;
        }
      },
      s);
}

int stage_out(const BottleneckStage& s) {
  return std::visit(
      [](const auto& b) {
        if constexpr (std::is_same_v<std::decay_t<decltype(b)>, ConvBlock>) {
          return b.spec.out_ch;
        } else {
          return b.out_ch;
        }
      },
      s);
}

}  // namespace

Tensor bottleneck_forward(const Tensor& x, const Bottleneck& blk) {
  Tensor y = stage_forward(stage_forward(x, blk.first), blk.second);
  if (blk.shortcut && stage_in(blk.first) == stage_out(blk.second)) y = add(x, y);
  return y;
}

C2fBlock C2fBlock::make(int in_ch, int out_ch, int n, C2fVariant variant, bool shortcut) {
  if (out_ch <= 0 || out_ch % 2 != 0) {
    throw SpecError(fmt::format("C2f output channels {} must be even", out_ch));
  }
  if (n < 0) throw SpecError("C2f bottleneck count must be non-negative");
  const int h = out_ch / 2;
  if (variant == C2fVariant::EMCM && h % 4 != 0) {
    throw SpecError(fmt::format("C2f-EMCM hidden width {} not divisible by 4", h));
  }
  C2fBlock b;
  b.in_ch = in_ch;
  b.out_ch = out_ch;
  b.variant = variant;
  b.cv1 = ConvBlock::standard(in_ch, 2 * h, 1);
  for (int i = 0; i < n; ++i) {
    Bottleneck bn;
    if (variant == C2fVariant::Standard) {
      bn.first = ConvBlock::standard(h, h, 3);
      bn.second = ConvBlock::standard(h, h, 3);
    } else {
      bn.first = EMCMBlock::make(h, h);
      bn.second = EMCMBlock::make(h, h);
    }
    bn.shortcut = shortcut;
    b.bottlenecks.push_back(std::move(bn));
  }
  b.cv2 = ConvBlock::standard((2 + n) * h, out_ch, 1);
  return b;
}

Tensor c2f_forward(const Tensor& x, const C2fBlock& blk) {
  const int h = blk.hidden();
  const std::array<int, 2> halves = {h, h};
  std::vector<Tensor> ys = split_channels(conv_block_forward(x, blk.cv1), halves);
  for (const auto& bn : blk.bottlenecks) {
    Tensor next = bottleneck_forward(ys.back(), bn);
    ys.push_back(std::move(next));
  }
  return conv_block_forward(concat_channels(ys), blk.cv2);
}

// ---------------------------------------------------------------------------
// SPPF

SPPFBlock SPPFBlock::make(int in_ch, int out_ch) {
  const int hidden = in_ch / 2;
  return {ConvBlock::standard(in_ch, hidden, 1), ConvBlock::standard(4 * hidden, out_ch, 1)};
}

Tensor sppf_forward(const Tensor& x, const SPPFBlock& blk) {
  const PoolSpec pool{PoolMode::Max, 5, 1, 2};
  std::array<Tensor, 4> maps;
  maps[0] = conv_block_forward(x, blk.cv1);
  for (int i = 1; i < 4; ++i) maps[i] = pool2d(maps[i - 1], pool);
  return conv_block_forward(concat_channels(maps), blk.cv2);
}

// ---------------------------------------------------------------------------
// Attention

MSCABlock MSCABlock::make(int channels) {
  MSCABlock b;
  b.channels = channels;
  b.base = ConvBlock::plain(Conv2dSpec::square(channels, channels, 5, 1, channels));
  for (std::size_t i = 0; i < kStripLengths.size(); ++i) {
    const int len = kStripLengths[i];
    Conv2dSpec h;
    h.in_ch = h.out_ch = h.groups = channels;
    h.kh = 1;
    h.kw = len;
    h.pad_h = 0;
    h.pad_w = len / 2;
    Conv2dSpec v = h;
    v.kh = len;
    v.kw = 1;
    v.pad_h = len / 2;
    v.pad_w = 0;
    b.strips[i] = {len, ConvBlock::plain(h), ConvBlock::plain(v)};
  }
  b.mix = ConvBlock::plain(Conv2dSpec::square(channels, channels, 1));
  return b;
}

Tensor msca_forward(const Tensor& x, const MSCABlock& blk) {
  if (x.c() != blk.channels) {
    throw ShapeError(fmt::format("MSCA: input axis c is {}, expected {}", x.c(), blk.channels));
  }
  const Tensor u = conv_block_forward(x, blk.base);
  Tensor s = u;
  for (const auto& pair : blk.strips) {
    s = add(s, conv_block_forward(conv_block_forward(u, pair.horizontal), pair.vertical));
  }
  const Tensor att = conv_block_forward(s, blk.mix);
  return mul(att, x);
}

SegNextAttentionBlock SegNextAttentionBlock::make(int channels) {
  SegNextAttentionBlock b;
  b.channels = channels;
  b.proj_in = ConvBlock::plain(Conv2dSpec::square(channels, channels, 1));
  b.msca = MSCABlock::make(channels);
  b.proj_out = ConvBlock::plain(Conv2dSpec::square(channels, channels, 1));
  return b;
}

Tensor segnext_attention_forward(const Tensor& x, const SegNextAttentionBlock& blk) {
  if (x.c() != blk.channels) {
    throw ShapeError(
        fmt::format("SegNext attention: input axis c is {}, expected {}", x.c(), blk.channels));
  }
  Tensor y = gelu(conv_block_forward(x, blk.proj_in));
  y = msca_forward(y, blk.msca);
  y = conv_block_forward(y, blk.proj_out);
  return add(y, x);
}

// ---------------------------------------------------------------------------
// Heads

void HeadConfig::validate() const {
  if (nc < 1) throw SpecError(fmt::format("head needs at least one class, got nc={}", nc));
  if (reg_max < 1) throw SpecError("head reg_max must be positive");
  if (rldd_hidden < 1) throw SpecError("RLDD hidden width must be positive");
}

namespace {

void require_level(const Tensor& t, int channels, int level) {
  if (t.c() != channels) {
    throw ShapeError(fmt::format("head level P{}: input axis c is {}, expected {}", level + 3,
                                 t.c(), channels));
  }
}

}  // namespace

BaselineHead BaselineHead::make(const HeadConfig& cfg) {
  cfg.validate();
  BaselineHead head;
  head.cfg = cfg;
  const int c2 = cfg.box_hidden();
  const int c3 = cfg.cls_hidden();
  for (std::size_t i = 0; i < 3; ++i) {
    const int ch = cfg.level_channels[i];
    auto& lv = head.levels[i];
    lv.box0 = ConvBlock::standard(ch, c2, 3);
    lv.box1 = ConvBlock::standard(c2, c2, 3);
    lv.box_out = ConvBlock::plain(Conv2dSpec::square(c2, cfg.box_channels(), 1));
    lv.cls0 = ConvBlock::standard(ch, c3, 3);
    lv.cls1 = ConvBlock::standard(c3, c3, 3);
    lv.cls_out = ConvBlock::plain(Conv2dSpec::square(c3, cfg.nc, 1));
  }
  return head;
}

HeadMaps baseline_head_forward(const Tensor& p3, const Tensor& p4, const Tensor& p5,
                               const BaselineHead& head) {
  const std::array<const Tensor*, 3> in = {&p3, &p4, &p5};
  HeadMaps out;
  for (std::size_t i = 0; i < 3; ++i) {
    require_level(*in[i], head.cfg.level_channels[i], static_cast<int>(i));
    const auto& lv = head.levels[i];
    Tensor box = conv_block_forward(
        conv_block_forward(conv_block_forward(*in[i], lv.box0), lv.box1), lv.box_out);
    Tensor cls = conv_block_forward(
        conv_block_forward(conv_block_forward(*in[i], lv.cls0), lv.cls1), lv.cls_out);
    const std::array<Tensor, 2> parts = {std::move(box), std::move(cls)};
    out[i] = concat_channels(parts);
  }
  return out;
}

RLDDHead RLDDHead::make(const HeadConfig& cfg) {
  cfg.validate();
  RLDDHead head;
  head.cfg = cfg;
  const int hid = cfg.rldd_hidden;
  for (std::size_t i = 0; i < 3; ++i) {
    head.stems[i] = ConvBlock::standard(cfg.level_channels[i], hid, 1);
  }
  for (auto& rep : head.stack) rep = RepConvBlock::make(hid, hid, 1);
  head.box_out = ConvBlock::plain(Conv2dSpec::square(hid, cfg.box_channels(), 1));
  head.cls_out = ConvBlock::plain(Conv2dSpec::square(hid, cfg.nc, 1));
  return head;
}

HeadMaps rldd_head_forward(const Tensor& p3, const Tensor& p4, const Tensor& p5,
                           const RLDDHead& head) {
  if (head.stack[0].mode != head.stack[1].mode) {
    throw StateError("RLDD head: shared RepConv stack mixes train and deploy forms");
  }
  const std::array<const Tensor*, 3> in = {&p3, &p4, &p5};
  HeadMaps out;
  for (std::size_t i = 0; i < 3; ++i) {
    require_level(*in[i], head.cfg.level_channels[i], static_cast<int>(i));
    Tensor f = conv_block_forward(*in[i], head.stems[i]);
    for (const auto& rep : head.stack) f = repconv_forward(f, rep);
    Tensor box = scale(conv_block_forward(f, head.box_out), head.scales[i]);
    Tensor cls = conv_block_forward(f, head.cls_out);
    const std::array<Tensor, 2> parts = {std::move(box), std::move(cls)};
    out[i] = concat_channels(parts);
  }
  return out;
}

}  // namespace repdet
