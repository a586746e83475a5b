#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "repdet/blocks.hpp"
#include "repdet/eval.hpp"
#include "repdet/tensor.hpp"

// Slow reference implementations used to cross-check the production kernels
// and metrics. They share no code with the code they check.
namespace repdet::oracle {

// Textbook 7-loop convolution, double accumulation.
Tensor conv2d(const Tensor& x, const Conv2dSpec& spec, const Tensor& w, std::span<const float> bias);
// Explicit window walk; avg counts every cell of the k x k window, padding included.
Tensor pool2d(const Tensor& x, const PoolSpec& spec);
// Direct exp / sum per channel group, no max shift.
Tensor softmax_channelwise(const Tensor& x, int group);

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  std::optional<double> ap;
};

struct Metrics {
  std::vector<ClassMetrics> classes;
  double map = 0;
};

// Sweeps every distinct score as a confidence threshold, re-matches the
// surviving detections from scratch at each one and integrates the precision
// envelope exactly over recall. Assumes distinct scores within a class.
Metrics exhaustive_threshold_metrics(const std::vector<std::vector<Detection>>& per_image,
                                     const Dataset& data, double iou_thresh = 0.5);

struct SyntheticEval {
  Dataset data;
  std::vector<std::vector<Detection>> detections;
};

// In-memory dataset with planted true positives, near misses, duplicates and
// wrong-class detections. Scores are distinct.
SyntheticEval make_synthetic_eval(std::uint64_t seed, int images = 20, int nc = 3);

// Random kernel and BN statistics (gamma, var away from 0) for fusion checks.
void randomize(RepConvBlock& blk, std::mt19937_64& rng);
RepConvBlock random_repconv(std::mt19937_64& rng, int in_ch, int out_ch, int stride);

Tensor random_tensor(Dims d, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f);

struct ConvCase {
  Tensor x;
  Conv2dSpec spec;
  Tensor w;
  std::vector<float> bias;
};
// Random shape covering stride, padding, dilation, groups and bias.
ConvCase random_conv_case(std::mt19937_64& rng);

struct PoolCase {
  Tensor x;
  PoolSpec spec;
};
PoolCase random_pool_case(std::mt19937_64& rng, PoolMode mode);

}  // namespace repdet::oracle
