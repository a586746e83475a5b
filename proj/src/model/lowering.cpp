#include "repdet/lowering.hpp"

#include <variant>

#include "repdet/block_params.hpp"
#include "repdet/errors.hpp"

namespace repdet {
namespace {

Layer make_layer(std::string name, LayerKind kind, std::vector<std::string> inputs,
                 std::string role = {}) {
  Layer l;
  l.name = std::move(name);
  l.kind = kind;
  l.inputs = std::move(inputs);
  l.role = std::move(role);
  return l;
}

std::string add_conv(GraphBuilder& b, const std::string& name, const std::string& key,
                     const std::string& input, const Conv2dSpec& spec, std::string role) {
  Layer l = make_layer(name, LayerKind::Conv, {input}, std::move(role));
  l.param_key = key;
  l.attrs = spec;
  return b.add(std::move(l));
}

std::string add_bn(GraphBuilder& b, const std::string& name, const std::string& key,
                   const std::string& input, const BatchNormParams& bn, std::string role) {
  Layer l = make_layer(name, LayerKind::BatchNorm, {input}, std::move(role));
  l.param_key = key;
  l.attrs = BatchNormAttrs{bn.channels(), bn.eps};
  return b.add(std::move(l));
}

std::string add_slice(GraphBuilder& b, const std::string& name, const std::string& input,
                      int begin, int count) {
  Layer l = make_layer(name, LayerKind::Slice, {input});
  l.attrs = SliceAttrs{begin, count};
  return b.add(std::move(l));
}

std::string lower_stage(GraphBuilder& b, const BottleneckStage& stage, const std::string& name,
                        const std::string& key, const std::string& input) {
  return std::visit([&](const auto& s) { return lower(b, s, name, key, input); }, stage);
}

int stage_channels_in(const BottleneckStage& s) {
  if (const auto* c = std::get_if<ConvBlock>(&s)) return c->spec.in_ch;
  return std::get<EMCMBlock>(s).in_ch;
}

int stage_channels_out(const BottleneckStage& s) {
  if (const auto* c = std::get_if<ConvBlock>(&s)) return c->spec.out_ch;
  return std::get<EMCMBlock>(s).out_ch;
}

}  // namespace

std::string lower(GraphBuilder& b, const ConvBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input) {
  std::string out = add_conv(b, name + ".conv", key + ".conv", input, blk.spec, "conv");
  if (blk.bn) out = add_bn(b, name + ".bn", key + ".bn", out, *blk.bn, "bn");
  if (blk.act == Activation::SiLU) {
    out = b.add(make_layer(name + ".act", LayerKind::SiLU, {out}, "act"));
  }
  return out;
}

std::string lower(GraphBuilder& b, const RepConvBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input) {
  auto guard = b.scope(BlockKind::RepConv, name, key);
  std::string sum;
  if (blk.mode == RepMode::Deploy) {
    if (!blk.deploy_conv) throw StateError("cannot lower deploy-form RepConv without fused conv");
    sum = add_conv(b, name + ".fused.conv", key + ".fused.conv", input, blk.deploy_conv->spec,
                   "fused");
  } else {
    if (!blk.branches) throw StateError("cannot lower train-form RepConv without branches");
    const RepBranches& br = *blk.branches;
    std::vector<std::string> parts;
    std::string t = add_conv(b, name + ".b3.conv", key + ".b3.conv", input, br.conv3x3.spec,
                             "branch3x3");
    parts.push_back(add_bn(b, name + ".b3.bn", key + ".b3.bn", t, *br.conv3x3.bn, "branch3x3_bn"));
    t = add_conv(b, name + ".b1.conv", key + ".b1.conv", input, br.conv1x1.spec, "branch1x1");
    parts.push_back(add_bn(b, name + ".b1.bn", key + ".b1.bn", t, *br.conv1x1.bn, "branch1x1_bn"));
    if (br.avg_bn && blk.stride == 1) {
      Layer pool = make_layer(name + ".avg", LayerKind::AvgPool, {input}, "branch_avg");
      pool.attrs = PoolSpec{PoolMode::Avg, 3, 1, 1};
      t = b.add(std::move(pool));
      parts.push_back(add_bn(b, name + ".avg.bn", key + ".avg.bn", t, *br.avg_bn, "branch_avg_bn"));
    }
    sum = b.add(make_layer(name + ".sum", LayerKind::Add, parts, "branch_sum"));
  }
  return b.add(make_layer(name + ".act", LayerKind::SiLU, {sum}, "act"));
}

std::string lower(GraphBuilder& b, const EMCMBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input) {
  auto guard = b.scope(BlockKind::EMCM, name, key);
  const int keep = blk.keep_ch();
  const int q = blk.path_ch();
  const std::string kept = add_slice(b, name + ".keep", input, 0, keep);
  const std::string s3 = add_slice(b, name + ".split3", input, keep, q);
  const std::string s5 = add_slice(b, name + ".split5", input, keep + q, q);
  const std::string p3 = lower(b, blk.path3, name + ".path3", key + ".path3", s3);
  const std::string p5 = lower(b, blk.path5, name + ".path5", key + ".path5", s5);
  const std::string cat = b.add(make_layer(name + ".cat", LayerKind::Concat, {kept, p3, p5}));
  return lower(b, blk.fuse, name + ".fuse", key + ".fuse", cat);
}

std::string lower(GraphBuilder& b, const Bottleneck& blk, const std::string& name,
                  const std::string& key, const std::string& input) {
  auto guard = b.scope(BlockKind::Bottleneck, name, key);
  std::string y = lower_stage(b, blk.first, name + ".cv1", key + ".cv1", input);
  y = lower_stage(b, blk.second, name + ".cv2", key + ".cv2", y);
  if (blk.shortcut && stage_channels_in(blk.first) == stage_channels_out(blk.second)) {
    y = b.add(make_layer(name + ".add", LayerKind::Add, {input, y}, "shortcut"));
  }
  return y;
}

std::string lower(GraphBuilder& b, const C2fBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input) {
  auto guard = b.scope(blk.variant == C2fVariant::EMCM ? BlockKind::C2fEMCM : BlockKind::C2f,
                       name, key);
  const int h = blk.hidden();
  const std::string t = lower(b, blk.cv1, name + ".cv1", key + ".cv1", input);
  std::vector<std::string> ys = {add_slice(b, name + ".chunk0", t, 0, h),
                                 add_slice(b, name + ".chunk1", t, h, h)};
  for (std::size_t i = 0; i < blk.bottlenecks.size(); ++i) {
    const std::string idx = ".m." + std::to_string(i);
    ys.push_back(lower(b, blk.bottlenecks[i], name + idx, key + idx, ys.back()));
  }
  const std::string cat = b.add(make_layer(name + ".cat", LayerKind::Concat, ys));
  return lower(b, blk.cv2, name + ".cv2", key + ".cv2", cat);
}

std::string lower(GraphBuilder& b, const SPPFBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input) {
  auto guard = b.scope(BlockKind::SPPF, name, key);
  std::vector<std::string> maps = {lower(b, blk.cv1, name + ".cv1", key + ".cv1", input)};
  for (int i = 1; i <= 3; ++i) {
    Layer pool = make_layer(name + ".pool" + std::to_string(i), LayerKind::MaxPool, {maps.back()});
    pool.attrs = PoolSpec{PoolMode::Max, 5, 1, 2};
    maps.push_back(b.add(std::move(pool)));
  }
  const std::string cat = b.add(make_layer(name + ".cat", LayerKind::Concat, maps));
  return lower(b, blk.cv2, name + ".cv2", key + ".cv2", cat);
}

std::string lower(GraphBuilder& b, const MSCABlock& blk, const std::string& name,
                  const std::string& key, const std::string& input) {
  auto guard = b.scope(BlockKind::MSCA, name, key);
  const std::string u = lower(b, blk.base, name + ".base", key + ".base", input);
  std::vector<std::string> terms = {u};
  for (const auto& pair : blk.strips) {
    const std::string p = ".strip" + std::to_string(pair.length);
    const std::string h = lower(b, pair.horizontal, name + p + ".h", key + p + ".h", u);
    terms.push_back(lower(b, pair.vertical, name + p + ".v", key + p + ".v", h));
  }
  const std::string sum = b.add(make_layer(name + ".sum", LayerKind::Add, terms, "scale_sum"));
  const std::string att = lower(b, blk.mix, name + ".mix", key + ".mix", sum);
  return b.add(make_layer(name + ".mul", LayerKind::Mul, {att, input}, "attend"));
}

std::string lower(GraphBuilder& b, const SegNextAttentionBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input) {
  auto guard = b.scope(BlockKind::SegNextAttention, name, key);
  std::string y = lower(b, blk.proj_in, name + ".proj_in", key + ".proj_in", input);
  y = b.add(make_layer(name + ".gelu", LayerKind::GELU, {y}));
  y = lower(b, blk.msca, name + ".msca", key + ".msca", y);
  y = lower(b, blk.proj_out, name + ".proj_out", key + ".proj_out", y);
  return b.add(make_layer(name + ".add", LayerKind::Add, {y, input}, "shortcut"));
}

std::array<std::string, 3> lower(GraphBuilder& b, const BaselineHead& head,
                                 const std::string& name,
                                 const std::array<std::string, 3>& inputs) {
  auto guard = b.scope(BlockKind::BaselineHead, name, name);
  std::array<std::string, 3> outs;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = name + "." + level_name(i);
    const auto& lv = head.levels[i];
    std::string box = lower(b, lv.box0, p + ".box0", p + ".box0", inputs[i]);
    box = lower(b, lv.box1, p + ".box1", p + ".box1", box);
    box = lower(b, lv.box_out, p + ".box_out", p + ".box_out", box);
    std::string cls = lower(b, lv.cls0, p + ".cls0", p + ".cls0", inputs[i]);
    cls = lower(b, lv.cls1, p + ".cls1", p + ".cls1", cls);
    cls = lower(b, lv.cls_out, p + ".cls_out", p + ".cls_out", cls);
    outs[i] = b.add(make_layer(p + ".out", LayerKind::Concat, {box, cls}, "output"));
  }
  return outs;
}

std::array<std::string, 3> lower(GraphBuilder& b, const RLDDHead& head, const std::string& name,
                                 const std::array<std::string, 3>& inputs) {
  auto guard = b.scope(BlockKind::RLDDHead, name, name);
  std::array<std::string, 3> outs;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = name + "." + level_name(i);
    std::string f = lower(b, head.stems[i], p + ".stem", p + ".stem", inputs[i]);
    for (std::size_t r = 0; r < head.stack.size(); ++r) {
      const std::string rep = ".rep" + std::to_string(r);
      f = lower(b, head.stack[r], p + rep, name + rep, f);
    }
    std::string box = lower(b, head.box_out, p + ".box", name + ".box", f);
    Layer sc = make_layer(p + ".box_scale", LayerKind::Scale, {box}, "level_scale");
    sc.param_key = name + ".scale." + level_name(i);
    box = b.add(std::move(sc));
    const std::string cls = lower(b, head.cls_out, p + ".cls", name + ".cls", f);
    outs[i] = b.add(make_layer(p + ".out", LayerKind::Concat, {box, cls}, "output"));
  }
  return outs;
}

}  // namespace repdet
