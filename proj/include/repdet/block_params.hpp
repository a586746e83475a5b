#pragma once

#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "repdet/blocks.hpp"

// Parameter traversal for blocks. Every visitor calls
//   fn(name, shape, values, role)
// once per tensor, where `values` is a span over the block's own storage
// (const when the block is const). Names are "<prefix><role suffix>" and are
// the same keys the model graph uses in its WeightStore.
namespace repdet {

enum class ParamRole { Learnable, Buffer };

using ParamShape = std::vector<std::uint32_t>;

template <class B, class T>
concept BlockOf = std::same_as<std::remove_const_t<B>, T>;

inline ParamShape shape_of(const Tensor& t) {
  const Dims d = t.dims();
  return {static_cast<std::uint32_t>(d.n), static_cast<std::uint32_t>(d.c),
          static_cast<std::uint32_t>(d.h), static_cast<std::uint32_t>(d.w)};
}

template <BlockOf<BatchNormParams> B, class Fn>
void visit_params(B& bn, const std::string& prefix, Fn&& fn) {
  const ParamShape s = {static_cast<std::uint32_t>(bn.gamma.size())};
  fn(prefix + ".gamma", s, std::span(bn.gamma), ParamRole::Learnable);
  fn(prefix + ".beta", s, std::span(bn.beta), ParamRole::Learnable);
  fn(prefix + ".mean", s, std::span(bn.running_mean), ParamRole::Buffer);
  fn(prefix + ".var", s, std::span(bn.running_var), ParamRole::Buffer);
}

template <BlockOf<ConvBlock> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".conv.w", shape_of(b.weight), std::span(b.weight.values()), ParamRole::Learnable);
  if (b.spec.has_bias) {
    fn(prefix + ".conv.b", ParamShape{static_cast<std::uint32_t>(b.bias.size())},
       std::span(b.bias), ParamRole::Learnable);
  }
  if (b.bn) visit_params(*b.bn, prefix + ".bn", fn);
}

template <BlockOf<RepConvBlock> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  if (b.mode == RepMode::Deploy) {
    if (b.deploy_conv) visit_params(*b.deploy_conv, prefix + ".fused", fn);
    return;
  }
  if (!b.branches) return;
  visit_params(b.branches->conv3x3, prefix + ".b3", fn);
  visit_params(b.branches->conv1x1, prefix + ".b1", fn);
  if (b.branches->avg_bn) visit_params(*b.branches->avg_bn, prefix + ".avg.bn", fn);
}

template <BlockOf<EMCMBlock> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  visit_params(b.path3, prefix + ".path3", fn);
  visit_params(b.path5, prefix + ".path5", fn);
  visit_params(b.fuse, prefix + ".fuse", fn);
}

template <BlockOf<Bottleneck> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  std::visit([&](auto& s) { visit_params(s, prefix + ".cv1", fn); }, b.first);
  std::visit([&](auto& s) { visit_params(s, prefix + ".cv2", fn); }, b.second);
}

template <BlockOf<C2fBlock> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  visit_params(b.cv1, prefix + ".cv1", fn);
  for (std::size_t i = 0; i < b.bottlenecks.size(); ++i) {
    visit_params(b.bottlenecks[i], prefix + ".m." + std::to_string(i), fn);
  }
  visit_params(b.cv2, prefix + ".cv2", fn);
}

template <BlockOf<SPPFBlock> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  visit_params(b.cv1, prefix + ".cv1", fn);
  visit_params(b.cv2, prefix + ".cv2", fn);
}

template <BlockOf<MSCABlock> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  visit_params(b.base, prefix + ".base", fn);
  for (auto& pair : b.strips) {
    const std::string p = prefix + ".strip" + std::to_string(pair.length);
    visit_params(pair.horizontal, p + ".h", fn);
    visit_params(pair.vertical, p + ".v", fn);
  }
  visit_params(b.mix, prefix + ".mix", fn);
}

template <BlockOf<SegNextAttentionBlock> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  visit_params(b.proj_in, prefix + ".proj_in", fn);
  visit_params(b.msca, prefix + ".msca", fn);
  visit_params(b.proj_out, prefix + ".proj_out", fn);
}

inline const char* level_name(std::size_t i) {
  static constexpr const char* kNames[] = {"p3", "p4", "p5"};
  return kNames[i];
}

template <BlockOf<BaselineHead> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = prefix + "." + level_name(i);
    auto& lv = b.levels[i];
    visit_params(lv.box0, p + ".box0", fn);
    visit_params(lv.box1, p + ".box1", fn);
    visit_params(lv.box_out, p + ".box_out", fn);
    visit_params(lv.cls0, p + ".cls0", fn);
    visit_params(lv.cls1, p + ".cls1", fn);
    visit_params(lv.cls_out, p + ".cls_out", fn);
  }
}

template <BlockOf<RLDDHead> B, class Fn>
void visit_params(B& b, const std::string& prefix, Fn&& fn) {
  for (std::size_t i = 0; i < 3; ++i) {
    visit_params(b.stems[i], prefix + "." + level_name(i) + ".stem", fn);
  }
  for (std::size_t i = 0; i < b.stack.size(); ++i) {
    visit_params(b.stack[i], prefix + ".rep" + std::to_string(i), fn);
  }
  visit_params(b.box_out, prefix + ".box", fn);
  visit_params(b.cls_out, prefix + ".cls", fn);
  for (std::size_t i = 0; i < 3; ++i) {
    fn(prefix + ".scale." + level_name(i), ParamShape{1}, std::span(&b.scales[i], 1),
       ParamRole::Learnable);
  }
}

// Learnable scalars (conv weights/biases, BN gamma/beta, scales).
template <class B>
std::size_t block_param_count(const B& b) {
  std::size_t total = 0;
  visit_params(b, "", [&](const std::string&, const ParamShape&, auto values, ParamRole role) {
    if (role == ParamRole::Learnable) total += values.size();
  });
  return total;
}

}  // namespace repdet
