#include "repdet/graph.hpp"

#include <fmt/format.h>

#include <set>

#include "repdet/errors.hpp"

namespace repdet {

std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "Input";
    case LayerKind::Conv: return "Conv";
    case LayerKind::BatchNorm: return "BatchNorm";
    case LayerKind::SiLU: return "SiLU";
    case LayerKind::GELU: return "GELU";
    case LayerKind::MaxPool: return "MaxPool";
    case LayerKind::AvgPool: return "AvgPool";
    case LayerKind::Upsample: return "Upsample";
    case LayerKind::Concat: return "Concat";
    case LayerKind::Slice: return "Slice";
    case LayerKind::Add: return "Add";
    case LayerKind::Mul: return "Mul";
    case LayerKind::Scale: return "Scale";
  }
  return "?";
}

std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Conv: return "Conv";
    case BlockKind::C2f: return "C2f";
    case BlockKind::C2fEMCM: return "C2f-EMCM";
    case BlockKind::Bottleneck: return "Bottleneck";
    case BlockKind::EMCM: return "EMCM";
    case BlockKind::SPPF: return "SPPF";
    case BlockKind::SegNextAttention: return "SegNextAttention";
    case BlockKind::MSCA: return "MSCA";
    case BlockKind::RepConv: return "RepConv";
    case BlockKind::BaselineHead: return "Detect";
    case BlockKind::RLDDHead: return "RLDD";
    case BlockKind::Upsample: return "Upsample";
    case BlockKind::Concat: return "Concat";
  }
  return "?";
}

std::string_view to_string(ModelVariant v) {
  return v == ModelVariant::Baseline ? "baseline" : "improved";
}

ModelVariant parse_variant(std::string_view s) {
  if (s == "baseline") return ModelVariant::Baseline;
  if (s == "improved") return ModelVariant::Improved;
  throw SpecError(fmt::format("unknown model variant '{}' (expected baseline|improved)", s));
}

ModelOptions ModelOptions::for_variant(ModelVariant v) {
  if (v == ModelVariant::Baseline) return {};
  return {true, true, true};
}

const Layer* ModelGraph::find(std::string_view name) const {
  for (const auto& l : layers) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

std::size_t ModelGraph::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  throw SpecError(fmt::format("graph has no layer named '{}'", name));
}

void validate_graph(const ModelGraph& g) {
  std::set<std::string, std::less<>> seen;
  for (const auto& l : g.layers) {
    for (const auto& in : l.inputs) {
      if (!seen.contains(in)) {
        throw SpecError(fmt::format("layer '{}' reads '{}' which is not an earlier layer", l.name, in));
      }
    }
    if (!seen.insert(l.name).second) throw SpecError(fmt::format("duplicate layer name '{}'", l.name));
  }
  if (g.outputs.size() != 3) {
    throw SpecError(fmt::format("graph must have exactly 3 outputs, has {}", g.outputs.size()));
  }
  for (const auto& o : g.outputs) {
    if (!seen.contains(o)) throw SpecError(fmt::format("graph output '{}' is not a layer", o));
  }
}

std::map<BlockKind, int> count_blocks(const ModelGraph& g) {
  std::set<std::pair<BlockKind, std::string>> instances;
  for (const auto& l : g.layers) {
    for (const auto& s : l.scopes) instances.emplace(s.kind, s.instance);
  }
  std::map<BlockKind, int> counts;
  for (const auto& [kind, name] : instances) ++counts[kind];
  return counts;
}

std::map<BlockKind, int> count_block_params(const ModelGraph& g) {
  std::set<std::pair<BlockKind, std::string>> prefixes;
  for (const auto& l : g.layers) {
    for (const auto& s : l.scopes) prefixes.emplace(s.kind, s.params);
  }
  std::map<BlockKind, int> counts;
  for (const auto& [kind, name] : prefixes) ++counts[kind];
  return counts;
}

GraphBuilder::ScopeGuard GraphBuilder::scope(BlockKind kind, std::string instance,
                                             std::string params) {
  stack_.push_back({kind, std::move(instance), std::move(params)});
  return ScopeGuard(*this);
}

std::string GraphBuilder::add(Layer layer) {
  for (const auto& in : layer.inputs) {
    if (!index_.contains(in)) {
      throw SpecError(fmt::format("layer '{}' reads unknown layer '{}'", layer.name, in));
    }
  }
  if (index_.contains(layer.name)) {
    throw SpecError(fmt::format("duplicate layer name '{}'", layer.name));
  }
  layer.scopes = stack_;
  index_.emplace(layer.name, layers_.size());
  layers_.push_back(std::move(layer));
  return layers_.back().name;
}

}  // namespace repdet
