#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <variant>
#include <vector>

#include "repdet/tensor.hpp"

// Composite network blocks as plain values plus pure forward functions.
// Factories produce zero weights and identity batch norms; fill them through
// the parameter visitors in block_params.hpp.
namespace repdet {

enum class Activation { None, SiLU };

// conv -> optional BN -> optional SiLU. When BN is present the conv carries no bias.
struct ConvBlock {
  Conv2dSpec spec;
  Tensor weight;
  std::vector<float> bias;  // spec.out_ch entries iff spec.has_bias
  std::optional<BatchNormParams> bn;
  Activation act = Activation::SiLU;

  static ConvBlock make(const Conv2dSpec& spec, bool with_bn, Activation act);
  // k x k conv, "same" padding, BN + SiLU. The standard YOLO Conv unit.
  static ConvBlock standard(int in_ch, int out_ch, int k, int stride = 1);
  // Biased conv with no BN and no activation.
  static ConvBlock plain(const Conv2dSpec& spec);

  void validate() const;
  bool operator==(const ConvBlock&) const = default;
};

Tensor conv_block_forward(const Tensor& x, const ConvBlock& blk);

enum class RepMode { Train, Deploy };

// Training-time branches of a RepConv: 3x3 conv+BN, 1x1 conv+BN and, at
// stride 1 with matching channels, a 3x3 average pool followed by BN.
struct RepBranches {
  ConvBlock conv3x3;
  ConvBlock conv1x1;
  std::optional<BatchNormParams> avg_bn;
  bool operator==(const RepBranches&) const = default;
};

struct RepConvBlock {
  int in_ch = 0;
  int out_ch = 0;
  int stride = 1;
  RepMode mode = RepMode::Train;
  std::optional<RepBranches> branches;   // train form
  std::optional<ConvBlock> deploy_conv;  // deploy form: 3x3, biased, no BN, no act

  static RepConvBlock make(int in_ch, int out_ch, int stride = 1);
  bool operator==(const RepConvBlock&) const = default;
};

// Train form: silu(bn3(conv3 x) + bn1(conv1 x) + bn_avg(avg x)).
// Deploy form: silu(conv_deploy x). Throws StateError if the active form is missing.
Tensor repconv_forward(const Tensor& x, const RepConvBlock& blk);

// Splits channels into [c/2 kept | c/4 -> 3x3 | c/4 -> 5x5], concatenates in
// that order and merges with a 1x1 conv.
struct EMCMBlock {
  int in_ch = 0;
  int out_ch = 0;
  ConvBlock path3;
  ConvBlock path5;
  ConvBlock fuse;

  static EMCMBlock make(int in_ch, int out_ch);
  int keep_ch() const { return in_ch / 2; }
  int path_ch() const { return in_ch / 4; }
  bool operator==(const EMCMBlock&) const = default;
};

Tensor emcm_forward(const Tensor& x, const EMCMBlock& blk);

enum class C2fVariant { Standard, EMCM };

using BottleneckStage = std::variant<ConvBlock, EMCMBlock>;

struct Bottleneck {
  BottleneckStage first;
  BottleneckStage second;
  bool shortcut = false;  // only honoured when in == out
  bool operator==(const Bottleneck&) const = default;
};

Tensor bottleneck_forward(const Tensor& x, const Bottleneck& blk);

struct C2fBlock {
  int in_ch = 0;
  int out_ch = 0;
  C2fVariant variant = C2fVariant::Standard;
  ConvBlock cv1;  // 1x1 in -> 2h
  std::vector<Bottleneck> bottlenecks;
  ConvBlock cv2;  // 1x1 (2+n)h -> out

  // Throws SpecError for odd out_ch, or for the EMCM variant when the hidden
  // width is not divisible by 4.
  static C2fBlock make(int in_ch, int out_ch, int n, C2fVariant variant, bool shortcut);
  int hidden() const { return out_ch / 2; }
  bool operator==(const C2fBlock&) const = default;
};

Tensor c2f_forward(const Tensor& x, const C2fBlock& blk);

struct SPPFBlock {
  ConvBlock cv1;
  ConvBlock cv2;
  static SPPFBlock make(int in_ch, int out_ch);
  bool operator==(const SPPFBlock&) const = default;
};

Tensor sppf_forward(const Tensor& x, const SPPFBlock& blk);

inline constexpr std::array<int, 3> kStripLengths = {7, 11, 21};

struct StripPair {
  int length = 0;
  ConvBlock horizontal;  // depthwise 1 x L
  ConvBlock vertical;    // depthwise L x 1
  bool operator==(const StripPair&) const = default;
};

// Multi-scale convolutional attention: depthwise 5x5 base, three depthwise
// strip pairs on top of it, summed, mixed by a 1x1 conv into a pixelwise
// attention map that multiplies the input.
struct MSCABlock {
  int channels = 0;
  ConvBlock base;
  std::array<StripPair, 3> strips;
  ConvBlock mix;

  static MSCABlock make(int channels);
  bool operator==(const MSCABlock&) const = default;
};

Tensor msca_forward(const Tensor& x, const MSCABlock& blk);

// Spatial attention wrapper around MSCA: x + proj_out(msca(gelu(proj_in(x)))).
struct SegNextAttentionBlock {
  int channels = 0;
  ConvBlock proj_in;
  MSCABlock msca;
  ConvBlock proj_out;

  static SegNextAttentionBlock make(int channels);
  bool operator==(const SegNextAttentionBlock&) const = default;
};

Tensor segnext_attention_forward(const Tensor& x, const SegNextAttentionBlock& blk);

struct HeadConfig {
  int nc = 3;
  int reg_max = 16;
  std::array<int, 3> strides = {8, 16, 32};
  std::array<int, 3> level_channels = {64, 128, 256};
  int rldd_hidden = 64;

  int box_channels() const { return 4 * reg_max; }
  int outputs_per_level() const { return nc + 4 * reg_max; }
  // Baseline tower widths: 64 and max(64, nc) at the default n-scale config.
  int box_hidden() const { return std::max({16, level_channels[0] / 4, 4 * reg_max}); }
  int cls_hidden() const { return std::max(level_channels[0], nc); }
  void validate() const;
  bool operator==(const HeadConfig&) const = default;
};

using HeadMaps = std::array<Tensor, 3>;

// Decoupled YOLOv8 head: independent box and class towers per level.
struct BaselineHeadLevel {
  ConvBlock box0, box1, box_out;
  ConvBlock cls0, cls1, cls_out;
  bool operator==(const BaselineHeadLevel&) const = default;
};

struct BaselineHead {
  HeadConfig cfg;
  std::array<BaselineHeadLevel, 3> levels;
  static BaselineHead make(const HeadConfig& cfg);
  bool operator==(const BaselineHead&) const = default;
};

HeadMaps baseline_head_forward(const Tensor& p3, const Tensor& p4, const Tensor& p5,
                               const BaselineHead& head);

// Reparameterized lightweight head: per-level 1x1 stems into a shared
// two-RepConv stack, shared 1x1 box/cls predictors and a per-level box scale.
struct RLDDHead {
  HeadConfig cfg;
  std::array<ConvBlock, 3> stems;
  std::array<RepConvBlock, 2> stack;
  ConvBlock box_out;
  ConvBlock cls_out;
  std::array<float, 3> scales = {1.0f, 1.0f, 1.0f};

  static RLDDHead make(const HeadConfig& cfg);
  bool operator==(const RLDDHead&) const = default;
};

HeadMaps rldd_head_forward(const Tensor& p3, const Tensor& p4, const Tensor& p5,
                           const RLDDHead& head);

}  // namespace repdet
