#include <fmt/format.h>

#include <map>
#include <optional>

#include "repdet/errors.hpp"
#include "repdet/model.hpp"
#include "repdet/ops.hpp"

namespace repdet {
namespace {

BatchNormParams bn_from_store(const Layer& l, const WeightStore& store) {
  const auto& a = std::get<BatchNormAttrs>(l.attrs);
  BatchNormParams p;
  p.gamma = store.at(l.param_key + ".gamma").values;
  p.beta = store.at(l.param_key + ".beta").values;
  p.running_mean = store.at(l.param_key + ".mean").values;
  p.running_var = store.at(l.param_key + ".var").values;
  p.eps = a.eps;
  return p;
}

}  // namespace

std::vector<Tensor> forward(const ModelGraph& g, const WeightStore& store, const Tensor& input) {
  const std::size_t n = g.layers.size();
  std::map<std::string_view, std::size_t> index;
  for (std::size_t i = 0; i < n; ++i) index.emplace(g.layers[i].name, i);

  // Last reader of each layer so intermediates can be released early.
  std::vector<std::size_t> last_use(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& in : g.layers[i].inputs) last_use[index.at(in)] = i;
  }
  for (const auto& o : g.outputs) last_use[index.at(o)] = n;

  std::vector<std::optional<Tensor>> values(n);
  auto arg = [&](const Layer& l, std::size_t k) -> const Tensor& {
    const auto& v = values[index.at(l.inputs[k])];
    if (!v) throw StateError(fmt::format("layer '{}' input '{}' was released", l.name, l.inputs[k]));
    return *v;
  };

  for (std::size_t i = 0; i < n; ++i) {
    const Layer& l = g.layers[i];
    Tensor out;
    switch (l.kind) {
      case LayerKind::Input:
        out = input;
        break;
      case LayerKind::Conv: {
        const auto& spec = std::get<Conv2dSpec>(l.attrs);
        const auto& w = store.at(l.param_key + ".w").values;
        std::span<const float> bias;
        if (spec.has_bias) bias = store.at(l.param_key + ".b").values;
        out = conv2d(arg(l, 0), spec, std::span<const float>(w), bias);
        break;
      }
      case LayerKind::BatchNorm:
        out = batch_norm_inference(arg(l, 0), bn_from_store(l, store));
        break;
      case LayerKind::SiLU:
        out = silu(arg(l, 0));
        break;
      case LayerKind::GELU:
        out = gelu(arg(l, 0));
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        out = pool2d(arg(l, 0), std::get<PoolSpec>(l.attrs));
        break;
      case LayerKind::Upsample:
        out = upsample_nearest2x(arg(l, 0));
        break;
      case LayerKind::Concat: {
        std::vector<Tensor> parts;
        parts.reserve(l.inputs.size());
        for (std::size_t k = 0; k < l.inputs.size(); ++k) parts.push_back(arg(l, k));
        out = concat_channels(parts);
        break;
      }
      case LayerKind::Slice: {
        const auto& s = std::get<SliceAttrs>(l.attrs);
        out = slice_channels(arg(l, 0), s.begin, s.count);
        break;
      }
      case LayerKind::Add:
        out = arg(l, 0);
        for (std::size_t k = 1; k < l.inputs.size(); ++k) out = add(out, arg(l, k));
        break;
      case LayerKind::Mul:
        out = mul(arg(l, 0), arg(l, 1));
        break;
      case LayerKind::Scale:
        out = scale(arg(l, 0), store.at(l.param_key).values.at(0));
        break;
    }
    values[i] = std::move(out);
    for (const auto& in : l.inputs) {
      const std::size_t j = index.at(in);
      if (last_use[j] == i) values[j].reset();
    }
  }

  std::vector<Tensor> outs;
  for (const auto& o : g.outputs) outs.push_back(*values[index.at(o)]);
  return outs;
}

}  // namespace repdet
