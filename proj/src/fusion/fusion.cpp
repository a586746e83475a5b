#include "repdet/fusion.hpp"

#include <fmt/format.h>

#include <cmath>
#include <map>
#include <set>

#include "repdet/errors.hpp"

namespace repdet {

FusedConv fuse_conv_bn(const Tensor& weight, std::span<const float> bias,
                       const BatchNormParams& bn) {
  bn.validate();
  const int out_ch = weight.n();
  if (bn.channels() != out_ch) {
    throw ShapeError(fmt::format("fuse_conv_bn: conv has {} output channels, BN has {}", out_ch,
                                 bn.channels()));
  }
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(out_ch)) {
    throw ShapeError(fmt::format("fuse_conv_bn: bias has {} entries, expected {}", bias.size(), out_ch));
  }
  FusedConv f{weight, std::vector<float>(static_cast<std::size_t>(out_ch))};
  const std::size_t per_out = weight.size() / static_cast<std::size_t>(out_ch);
  for (int o = 0; o < out_ch; ++o) {
    const double denom = std::sqrt(static_cast<double>(bn.running_var[o]) + bn.eps);
    if (!(denom > 0.0)) {
      throw NumericError(fmt::format("fuse_conv_bn: var + eps is not positive for channel {}", o));
    }
    const double k = bn.gamma[o] / denom;
    float* w = f.weight.values().data() + static_cast<std::size_t>(o) * per_out;
    for (std::size_t j = 0; j < per_out; ++j) w[j] = static_cast<float>(w[j] * k);
    const double b = bias.empty() ? 0.0 : bias[o];
    f.bias[o] = static_cast<float>(bn.beta[o] + (b - bn.running_mean[o]) * k);
  }
  return f;
}

Tensor lower_1x1_to_3x3(const Tensor& kernel) {
  if (kernel.h() != 1 || kernel.w() != 1) {
    throw UnsupportedError(fmt::format("lower_1x1_to_3x3: kernel is {}x{}", kernel.h(), kernel.w()));
  }
  Tensor out({kernel.n(), kernel.c(), 3, 3});
  for (int o = 0; o < kernel.n(); ++o) {
    for (int i = 0; i < kernel.c(); ++i) out.at(o, i, 1, 1) = kernel.at(o, i, 0, 0);
  }
  return out;
}

Tensor lower_avg_pool_to_3x3(int channels, int stride, int groups) {
  if (stride != 1) throw UnsupportedError("avg-pool lowering requires stride 1");
  if (groups != 1) throw UnsupportedError("avg-pool lowering requires an ungrouped conv");
  if (channels <= 0) throw SpecError("avg-pool lowering needs a positive channel count");
  Tensor out({channels, channels, 3, 3});
  for (int c = 0; c < channels; ++c) {
    for (int u = 0; u < 3; ++u) {
      for (int v = 0; v < 3; ++v) out.at(c, c, u, v) = 1.0f / 9.0f;
    }
  }
  return out;
}

namespace {

void accumulate(FusedConv& acc, const FusedConv& part) {
  if (acc.weight.dims() != part.weight.dims() || acc.bias.size() != part.bias.size()) {
    throw FusionError(fmt::format("branch kernel {} does not match {}", to_string(part.weight.dims()),
                                  to_string(acc.weight.dims())));
  }
  auto a = acc.weight.data();
  auto b = part.weight.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  for (std::size_t i = 0; i < acc.bias.size(); ++i) acc.bias[i] += part.bias[i];
}

const BatchNormParams& require_bn(const ConvBlock& c, const char* branch) {
  if (!c.bn) throw FusionError(fmt::format("RepConv {} branch has no batch norm", branch));
  return *c.bn;
}

}  // namespace

FusedConv fuse_repconv(const RepConvBlock& blk) {
  if (blk.mode != RepMode::Train || !blk.branches) {
    throw StateError("fuse_repconv expects a train-form block");
  }
  const RepBranches& br = *blk.branches;
  if (br.conv3x3.spec.kh != 3 || br.conv3x3.spec.kw != 3 || br.conv1x1.spec.kh != 1 ||
      br.conv1x1.spec.kw != 1) {
    throw FusionError("RepConv branches must be 3x3 and 1x1");
  }
  if (br.conv3x3.spec.stride != br.conv1x1.spec.stride ||
      br.conv3x3.spec.groups != br.conv1x1.spec.groups) {
    throw FusionError("RepConv branches disagree on stride or groups");
  }
  FusedConv fused = fuse_conv_bn(br.conv3x3.weight, br.conv3x3.bias, require_bn(br.conv3x3, "3x3"));
  const FusedConv one = fuse_conv_bn(br.conv1x1.weight, br.conv1x1.bias, require_bn(br.conv1x1, "1x1"));
  accumulate(fused, {lower_1x1_to_3x3(one.weight), one.bias});
  if (br.avg_bn) {
    const Tensor avg = lower_avg_pool_to_3x3(blk.in_ch, blk.stride, br.conv3x3.spec.groups);
    accumulate(fused, fuse_conv_bn(avg, {}, *br.avg_bn));
  }
  return fused;
}

RepConvBlock to_deploy(const RepConvBlock& blk) {
  if (blk.mode == RepMode::Deploy) return blk;
  FusedConv f = fuse_repconv(blk);
  RepConvBlock out;
  out.in_ch = blk.in_ch;
  out.out_ch = blk.out_ch;
  out.stride = blk.stride;
  out.mode = RepMode::Deploy;
  Conv2dSpec spec = blk.branches->conv3x3.spec;
  spec.has_bias = true;
  ConvBlock conv = ConvBlock::plain(spec);
  conv.weight = std::move(f.weight);
  conv.bias = std::move(f.bias);
  out.deploy_conv = std::move(conv);
  return out;
}

ConvBlock fold_conv_block(const ConvBlock& blk) {
  if (!blk.bn) return blk;
  FusedConv f = fuse_conv_bn(blk.weight, blk.bias, *blk.bn);
  ConvBlock out = blk;
  out.spec.has_bias = true;
  out.weight = std::move(f.weight);
  out.bias = std::move(f.bias);
  out.bn.reset();
  return out;
}

RLDDHead to_deploy(const RLDDHead& head) {
  RLDDHead out = head;
  for (auto& s : out.stems) s = fold_conv_block(s);
  for (auto& r : out.stack) r = to_deploy(r);
  return out;
}

// ---------------------------------------------------------------------------
// Graph pass

namespace {

bool is_branch_role(const std::string& role) {
  return role == "branch3x3" || role == "branch3x3_bn" || role == "branch1x1" ||
         role == "branch1x1_bn" || role == "branch_avg" || role == "branch_avg_bn" ||
         role == "branch_sum";
}

Tensor tensor_from(const StoredTensor& t) {
  if (t.dims.size() != 4) throw FusionError("conv weight tensor must be rank 4");
  return Tensor({static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]),
                 static_cast<int>(t.dims[2]), static_cast<int>(t.dims[3])},
                t.values);
}

StoredTensor stored_from(const Tensor& t) {
  return {{static_cast<std::uint32_t>(t.n()), static_cast<std::uint32_t>(t.c()),
           static_cast<std::uint32_t>(t.h()), static_cast<std::uint32_t>(t.w())},
          t.values()};
}

BatchNormParams bn_params(const Layer& l, const WeightStore& w) {
  BatchNormParams p;
  p.gamma = w.at(l.param_key + ".gamma").values;
  p.beta = w.at(l.param_key + ".beta").values;
  p.running_mean = w.at(l.param_key + ".mean").values;
  p.running_var = w.at(l.param_key + ".var").values;
  p.eps = std::get<BatchNormAttrs>(l.attrs).eps;
  return p;
}

// Rewrites every input reference according to `renamed`.
void rewire(std::vector<Layer>& layers, std::vector<std::string>& outputs,
            const std::map<std::string, std::string>& renamed) {
  auto fix = [&](std::string& s) {
    auto it = renamed.find(s);
    if (it != renamed.end()) s = it->second;
  };
  for (auto& l : layers) {
    for (auto& in : l.inputs) fix(in);
  }
  for (auto& o : outputs) fix(o);
}

struct RepGroup {
  const Layer* conv3 = nullptr;
  const Layer* bn3 = nullptr;
  const Layer* conv1 = nullptr;
  const Layer* bn1 = nullptr;
  const Layer* avg = nullptr;
  const Layer* avg_bn = nullptr;
  const Layer* sum = nullptr;
};

FusedConv fuse_group(const RepGroup& grp, const WeightStore& w) {
  if (!grp.conv3 || !grp.bn3 || !grp.conv1 || !grp.bn1 || !grp.sum) {
    throw FusionError("RepConv group is missing a branch layer");
  }
  const auto& s3 = std::get<Conv2dSpec>(grp.conv3->attrs);
  const auto& s1 = std::get<Conv2dSpec>(grp.conv1->attrs);
  if (s3.kh != 3 || s3.kw != 3 || s1.kh != 1 || s1.kw != 1 || s3.stride != s1.stride ||
      s3.in_ch != s1.in_ch || s3.out_ch != s1.out_ch || s3.groups != s1.groups) {
    throw FusionError(fmt::format("RepConv '{}' branch shapes are inconsistent", grp.sum->name));
  }
  auto conv_of = [&](const Layer& l) {
    const auto& spec = std::get<Conv2dSpec>(l.attrs);
    std::vector<float> bias;
    if (spec.has_bias) bias = w.at(l.param_key + ".b").values;
    return std::pair(tensor_from(w.at(l.param_key + ".w")), bias);
  };
  auto [w3, b3] = conv_of(*grp.conv3);
  auto [w1, b1] = conv_of(*grp.conv1);
  FusedConv fused = fuse_conv_bn(w3, b3, bn_params(*grp.bn3, w));
  const FusedConv one = fuse_conv_bn(w1, b1, bn_params(*grp.bn1, w));
  accumulate(fused, {lower_1x1_to_3x3(one.weight), one.bias});
  if (grp.avg) {
    if (!grp.avg_bn) throw FusionError("RepConv avg branch has no batch norm");
    const auto& pool = std::get<PoolSpec>(grp.avg->attrs);
    if (pool.kernel != 3 || pool.padding != 1 || pool.mode != PoolMode::Avg) {
      throw UnsupportedError("only 3x3 pad-1 average pools can be lowered");
    }
    if (s3.in_ch != s3.out_ch) throw UnsupportedError("avg branch needs in == out channels");
    const Tensor avg = lower_avg_pool_to_3x3(s3.in_ch, pool.stride, s3.groups);
    accumulate(fused, fuse_conv_bn(avg, {}, bn_params(*grp.avg_bn, w)));
  }
  return fused;
}

}  // namespace

std::size_t count_repconv_branch_layers(const ModelGraph& g) {
  std::size_t n = 0;
  for (const auto& l : g.layers) {
    const Scope* s = l.innermost();
    if (s && s->kind == BlockKind::RepConv && is_branch_role(l.role)) ++n;
  }
  return n;
}

Model fuse_model_graph(const ModelGraph& g, const WeightStore& weights) {
  validate_weights(g, weights);
  std::map<std::string, StoredTensor> produced;  // new or rewritten tensors

  // Pass 1: collapse each RepConv application into one 3x3 conv.
  std::vector<Layer> layers;
  std::map<std::string, std::string> renamed;
  for (std::size_t i = 0; i < g.layers.size();) {
    const Layer& l = g.layers[i];
    const Scope* s = l.innermost();
    if (!(s && s->kind == BlockKind::RepConv && is_branch_role(l.role))) {
      layers.push_back(l);
      ++i;
      continue;
    }
    const Scope scope = *s;
    RepGroup grp;
    std::size_t j = i;
    for (; j < g.layers.size(); ++j) {
      const Layer& m = g.layers[j];
      const Scope* ms = m.innermost();
      if (!ms || *ms != scope || !is_branch_role(m.role)) break;
      if (m.role == "branch3x3") grp.conv3 = &m;
      if (m.role == "branch3x3_bn") grp.bn3 = &m;
      if (m.role == "branch1x1") grp.conv1 = &m;
      if (m.role == "branch1x1_bn") grp.bn1 = &m;
      if (m.role == "branch_avg") grp.avg = &m;
      if (m.role == "branch_avg_bn") grp.avg_bn = &m;
      if (m.role == "branch_sum") grp.sum = &m;
    }
    const std::string key = scope.params + ".fused.conv";
    const FusedConv fused = fuse_group(grp, weights);
    if (auto it = produced.find(key + ".w"); it != produced.end()) {
      if (it->second != stored_from(fused.weight)) {
        throw FusionError(fmt::format("shared RepConv '{}' fuses to different kernels", scope.params));
      }
    } else {
      produced[key + ".w"] = stored_from(fused.weight);
      produced[key + ".b"] = {{static_cast<std::uint32_t>(fused.bias.size())}, fused.bias};
    }
    Layer conv;
    conv.name = scope.instance + ".fused.conv";
    conv.kind = LayerKind::Conv;
    conv.inputs = grp.conv3->inputs;
    conv.param_key = key;
    Conv2dSpec spec = std::get<Conv2dSpec>(grp.conv3->attrs);
    spec.has_bias = true;
    conv.attrs = spec;
    conv.role = "fused";
    conv.scopes = grp.conv3->scopes;
    renamed[grp.sum->name] = conv.name;
    layers.push_back(std::move(conv));
    i = j;
  }
  std::vector<std::string> outputs = g.outputs;
  rewire(layers, outputs, renamed);

  // Pass 2: fold BN into the conv feeding it when nothing else reads that conv.
  std::map<std::string, int> readers;
  for (const auto& l : layers) {
    for (const auto& in : l.inputs) ++readers[in];
  }
  for (const auto& o : outputs) ++readers[o];
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < layers.size(); ++i) pos[layers[i].name] = i;

  renamed.clear();
  std::vector<bool> drop(layers.size(), false);
  std::map<std::string, std::string> folded_with;  // conv key -> bn key
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Layer& bn = layers[i];
    if (bn.kind != LayerKind::BatchNorm) continue;
    const std::size_t ci = pos.at(bn.inputs.at(0));
    Layer& conv = layers[ci];
    if (conv.kind != LayerKind::Conv || readers[conv.name] != 1) continue;
    auto& spec = std::get<Conv2dSpec>(conv.attrs);
    auto [it, fresh] = folded_with.try_emplace(conv.param_key, bn.param_key);
    if (!fresh && it->second != bn.param_key) {
      throw FusionError(fmt::format("conv '{}' is shared but followed by different batch norms",
                                    conv.param_key));
    }
    if (fresh) {
      std::vector<float> bias;
      if (spec.has_bias) bias = weights.at(conv.param_key + ".b").values;
      const FusedConv f = fuse_conv_bn(tensor_from(weights.at(conv.param_key + ".w")), bias,
                                       bn_params(bn, weights));
      produced[conv.param_key + ".w"] = stored_from(f.weight);
      produced[conv.param_key + ".b"] = {{static_cast<std::uint32_t>(f.bias.size())}, f.bias};
    }
    spec.has_bias = true;
    renamed[bn.name] = conv.name;
    drop[i] = true;
  }
  std::vector<Layer> kept;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!drop[i]) kept.push_back(std::move(layers[i]));
  }
  rewire(kept, outputs, renamed);

  Model out;
  out.graph = g;
  out.graph.layers = std::move(kept);
  out.graph.outputs = std::move(outputs);
  out.graph.form = GraphForm::Deploy;
  validate_graph(out.graph);

  for (const auto& l : out.graph.layers) {
    for (const auto& d : layer_params(l)) {
      if (out.weights.contains(d.name)) continue;
      auto it = produced.find(d.name);
      out.weights.set(d.name, it != produced.end() ? it->second : weights.at(d.name));
    }
  }
  validate_weights(out.graph, out.weights);
  return out;
}

}  // namespace repdet
