#pragma once

#include <span>
#include <vector>

#include "repdet/blocks.hpp"
#include "repdet/model.hpp"

// Structural reparameterization: BN folding and RepConv branch collapse.
namespace repdet {

struct FusedConv {
  Tensor weight;
  std::vector<float> bias;
  bool operator==(const FusedConv&) const = default;
};

// W'_o = W_o * g_o / sqrt(var_o + eps), b'_o = beta_o + (b_o - mean_o) * g_o / sqrt(var_o + eps).
// `bias` may be empty (treated as zeros). Throws NumericError if var + eps <= 0.
FusedConv fuse_conv_bn(const Tensor& weight, std::span<const float> bias,
                       const BatchNormParams& bn);

// 1x1 kernel (o, i, 1, 1) -> 3x3 kernel with the value at the centre tap.
Tensor lower_1x1_to_3x3(const Tensor& kernel);
// 3x3 average pool over `channels` -> (c, c, 3, 3) kernel with 1/9 on the
// channel diagonal. Only stride 1, ungrouped pools are expressible.
Tensor lower_avg_pool_to_3x3(int channels, int stride = 1, int groups = 1);

// Collapses a train-form RepConv into one biased 3x3 conv.
FusedConv fuse_repconv(const RepConvBlock& blk);
RepConvBlock to_deploy(const RepConvBlock& blk);
// Folds BN into the conv; act is kept.
ConvBlock fold_conv_block(const ConvBlock& blk);
RLDDHead to_deploy(const RLDDHead& head);

// New graph + weights in which every RepConv is one conv (+SiLU) and every
// conv->BN pair is a single biased conv. Inputs are not modified. Applying it
// to an already fused model returns an identical model.
Model fuse_model_graph(const ModelGraph& g, const WeightStore& weights);

// Layers that are RepConv branches (3x3/1x1/avg convs, their BNs or the branch sum).
std::size_t count_repconv_branch_layers(const ModelGraph& g);

}  // namespace repdet
