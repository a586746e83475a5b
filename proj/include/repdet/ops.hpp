#pragma once

#include <span>
#include <vector>

#include "repdet/tensor.hpp"

// Deterministic NCHW kernels. Every function is pure: inputs are never
// modified and results depend only on the arguments.
namespace repdet {

// Direct convolution. Each output element starts from its bias (or 0) and
// accumulates in kernel-row, kernel-col, input-channel ascending order.
Tensor conv2d(const Tensor& x, const Conv2dSpec& spec, const Tensor& weights,
              std::span<const float> bias = {});
// Same kernel with the weights given as a flat (out, in/groups, kh, kw) buffer.
Tensor conv2d(const Tensor& x, const Conv2dSpec& spec, std::span<const float> weights,
              std::span<const float> bias);

Tensor batch_norm_inference(const Tensor& x, const BatchNormParams& p);

Tensor silu(const Tensor& x);
// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

// Avg mode divides by the full kernel area, zero padding included, so the
// result is exactly a fixed convolution. Max mode ignores padded cells.
Tensor pool2d(const Tensor& x, const PoolSpec& spec);

Tensor upsample_nearest2x(const Tensor& x);

Tensor concat_channels(std::span<const Tensor> xs);
std::vector<Tensor> split_channels(const Tensor& x, std::span<const int> sizes);
Tensor slice_channels(const Tensor& x, int begin, int count);

// Softmax over each run of `group` consecutive channels at every pixel.
Tensor softmax_channelwise(const Tensor& x, int group);

enum class ElementwiseOp { Mul, Add };
Tensor elementwise(const Tensor& x, const Tensor& y, ElementwiseOp op);
inline Tensor mul(const Tensor& x, const Tensor& y) { return elementwise(x, y, ElementwiseOp::Mul); }
inline Tensor add(const Tensor& x, const Tensor& y) { return elementwise(x, y, ElementwiseOp::Add); }
Tensor scale(const Tensor& x, float factor);

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace repdet
