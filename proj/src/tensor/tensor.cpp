#include "repdet/tensor.hpp"

#include <fmt/format.h>

#include "repdet/errors.hpp"

namespace repdet {

std::string to_string(const Dims& d) { return fmt::format("({},{},{},{})", d.n, d.c, d.h, d.w); }

Tensor::Tensor(Dims dims, float fill) : dims_(dims), data_(dims.count(), fill) {
  if (dims.n < 0 || dims.c < 0 || dims.h < 0 || dims.w < 0) {
    throw ShapeError("tensor dims must be non-negative, got " + to_string(dims));
  }
}

Tensor::Tensor(Dims dims, std::vector<float> values) : dims_(dims), data_(std::move(values)) {
  if (data_.size() != dims.count()) {
    throw ShapeError(fmt::format("tensor {} needs {} values, got {}", to_string(dims),
                                 dims.count(), data_.size()));
  }
}

Conv2dSpec Conv2dSpec::square(int in_ch, int out_ch, int k, int stride, int groups,
                              bool has_bias) {
  Conv2dSpec s;
  s.in_ch = in_ch;
  s.out_ch = out_ch;
  s.kh = k;
  s.kw = k;
  s.stride = stride;
  s.pad_h = k / 2;
  s.pad_w = k / 2;
  s.groups = groups;
  s.has_bias = has_bias;
  return s;
}

void Conv2dSpec::validate() const {
  if (in_ch <= 0 || out_ch <= 0 || kh <= 0 || kw <= 0 || stride <= 0 || dilation <= 0 ||
      groups <= 0 || pad_h < 0 || pad_w < 0) {
    throw SpecError(fmt::format(
        "conv spec has non-positive field: in={} out={} k={}x{} s={} d={} g={} p=({},{})", in_ch,
        out_ch, kh, kw, stride, dilation, groups, pad_h, pad_w));
  }
  if (in_ch % groups != 0 || out_ch % groups != 0) {
    throw SpecError(
        fmt::format("conv channels in={} out={} not divisible by groups={}", in_ch, out_ch, groups));
  }
}

BatchNormParams BatchNormParams::identity(int channels, float eps) {
  BatchNormParams p;
  const auto n = static_cast<std::size_t>(channels);
  p.gamma.assign(n, 1.0f);
  p.beta.assign(n, 0.0f);
  p.running_mean.assign(n, 0.0f);
  p.running_var.assign(n, 1.0f);
  p.eps = eps;
  return p;
}

void BatchNormParams::validate() const {
  const auto n = gamma.size();
  if (beta.size() != n || running_mean.size() != n || running_var.size() != n) {
    throw SpecError(fmt::format("batch norm vectors disagree: gamma={} beta={} mean={} var={}",
                                n, beta.size(), running_mean.size(), running_var.size()));
  }
  if (eps < 0.0f) throw SpecError("batch norm eps must be non-negative");
  for (float v : running_var) {
    if (v < 0.0f) throw SpecError("batch norm running_var must be non-negative");
  }
}

}  // namespace repdet
