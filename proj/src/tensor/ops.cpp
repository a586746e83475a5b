#include "repdet/ops.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "repdet/errors.hpp"

namespace repdet {
namespace {

void require_same_dims(const Tensor& x, const Tensor& y, const char* op) {
  if (x.dims() != y.dims()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, to_string(x.dims()),
                                 to_string(y.dims())));
  }
}

// First and last output columns whose input column ox*stride - pad + offset
// falls inside [0, in_w).
std::pair<int, int> valid_range(int out_len, int in_len, int stride, int pad, int offset) {
  const int shift = pad - offset;  // ix = ox*stride - shift
  int lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  int hi_num = in_len - 1 + shift;
  int hi = hi_num < 0 ? -1 : hi_num / stride;
  lo = std::max(lo, 0);
  hi = std::min(hi, out_len - 1);
  return {lo, hi};
}

}  // namespace

Tensor conv2d(const Tensor& x, const Conv2dSpec& spec, const Tensor& weights,
              std::span<const float> bias) {
  spec.validate();
  const Dims wd = spec.weight_dims();
  if (weights.dims() != wd) {
    const char* axis = weights.n() != wd.n   ? "out_ch"
                       : weights.c() != wd.c ? "in_ch/groups"
                       : weights.h() != wd.h ? "kh"
                                             : "kw";
    throw ShapeError(fmt::format("conv2d: weight axis {} mismatch, weights {} expected {}", axis,
                                 to_string(weights.dims()), to_string(wd)));
  }
  return conv2d(x, spec, weights.data(), bias);
}

Tensor conv2d(const Tensor& x, const Conv2dSpec& spec, std::span<const float> weights,
              std::span<const float> bias) {
  spec.validate();
  if (x.c() != spec.in_ch) {
    throw ShapeError(
        fmt::format("conv2d: input axis c is {}, spec expects {}", x.c(), spec.in_ch));
  }
  if (weights.size() != spec.weight_count()) {
    throw ShapeError(fmt::format("conv2d: weight buffer has {} values, expected {}",
                                 weights.size(), spec.weight_count()));
  }
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(spec.out_ch)) {
    throw ShapeError(fmt::format("conv2d: bias axis out_ch has {} values, expected {}",
                                 bias.size(), spec.out_ch));
  }
  const int oh = spec.out_h(x.h());
  const int ow = spec.out_w(x.w());
  if (oh < 1) throw ShapeError(fmt::format("conv2d: output axis h would be {} (< 1)", oh));
  if (ow < 1) throw ShapeError(fmt::format("conv2d: output axis w would be {} (< 1)", ow));

  Tensor y({x.n(), spec.out_ch, oh, ow});
  const int in_per_group = spec.in_ch / spec.groups;
  const int out_per_group = spec.out_ch / spec.groups;
  const std::size_t ksize = static_cast<std::size_t>(spec.kh) * spec.kw;

  for (int n = 0; n < x.n(); ++n) {
    for (int oc = 0; oc < spec.out_ch; ++oc) {
      const int g = oc / out_per_group;
      float* out = y.plane(n, oc);
      std::fill(out, out + y.dims().plane(), bias.empty() ? 0.0f : bias[oc]);
      const float* wbase = weights.data() + static_cast<std::size_t>(oc) * in_per_group * ksize;
      for (int ky = 0; ky < spec.kh; ++ky) {
        const int yoff = ky * spec.dilation;
        const auto [oy_lo, oy_hi] = valid_range(oh, x.h(), spec.stride, spec.pad_h, yoff);
        for (int kx = 0; kx < spec.kw; ++kx) {
          const int xoff = kx * spec.dilation;
          const auto [ox_lo, ox_hi] = valid_range(ow, x.w(), spec.stride, spec.pad_w, xoff);
          if (ox_lo > ox_hi) continue;
          for (int ic = 0; ic < in_per_group; ++ic) {
            const float wv = wbase[static_cast<std::size_t>(ic) * ksize +
                                   static_cast<std::size_t>(ky) * spec.kw + kx];
            const float* in = x.plane(n, g * in_per_group + ic);
            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
              const int iy = oy * spec.stride - spec.pad_h + yoff;
              const float* irow = in + static_cast<std::size_t>(iy) * x.w();
              float* orow = out + static_cast<std::size_t>(oy) * ow;
              if (spec.stride == 1) {
                const float* src = irow - spec.pad_w + xoff;
                for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * src[ox];
              } else {
                for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                  orow[ox] += wv * irow[ox * spec.stride - spec.pad_w + xoff];
                }
              }
            }
          }
        }
      }
    }
  }
  return y;
}

Tensor batch_norm_inference(const Tensor& x, const BatchNormParams& p) {
  p.validate();
  if (x.c() != p.channels()) {
    throw ShapeError(fmt::format("batch_norm: input axis c is {}, params have {} channels", x.c(),
                                 p.channels()));
  }
  Tensor y(x.dims());
  const std::size_t plane = x.dims().plane();
  for (int c = 0; c < x.c(); ++c) {
    const float denom = std::sqrt(p.running_var[c] + p.eps);
    if (!(denom > 0.0f)) {
      throw NumericError(fmt::format("batch_norm: var + eps is not positive for channel {}", c));
    }
    const float g = p.gamma[c];
    const float m = p.running_mean[c];
    const float b = p.beta[c];
    for (int n = 0; n < x.n(); ++n) {
      const float* in = x.plane(n, c);
      float* out = y.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) out[i] = g * (in[i] - m) / denom + b;
    }
  }
  return y;
}

Tensor silu(const Tensor& x) {
  Tensor y(x.dims());
  auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] / (1.0f + std::exp(-in[i]));
  return y;
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.dims());
  auto in = x.data();
  auto out = y.data();
  constexpr float kInvSqrt2 = 0.70710678118654752440f;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = 0.5f * in[i] * (1.0f + std::erf(in[i] * kInvSqrt2));
  }
  return y;
}

Tensor pool2d(const Tensor& x, const PoolSpec& spec) {
  if (spec.kernel <= 0 || spec.stride <= 0 || spec.padding < 0) {
    throw SpecError(fmt::format("pool2d: invalid kernel={} stride={} padding={}", spec.kernel,
                                spec.stride, spec.padding));
  }
  const int ph = x.h() + 2 * spec.padding;
  const int pw = x.w() + 2 * spec.padding;
  if (spec.kernel > ph || spec.kernel > pw) {
    throw ShapeError(fmt::format("pool2d: kernel {} larger than padded input {}x{}", spec.kernel,
                                 ph, pw));
  }
  const int oh = (ph - spec.kernel) / spec.stride + 1;
  const int ow = (pw - spec.kernel) / spec.stride + 1;
  Tensor y({x.n(), x.c(), oh, ow});
  const float area = static_cast<float>(spec.kernel * spec.kernel);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* in = x.plane(n, c);
      float* out = y.plane(n, c);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          float acc = spec.mode == PoolMode::Max ? -std::numeric_limits<float>::infinity() : 0.0f;
          for (int ky = 0; ky < spec.kernel; ++ky) {
            const int iy = oy * spec.stride - spec.padding + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int kx = 0; kx < spec.kernel; ++kx) {
              const int ix = ox * spec.stride - spec.padding + kx;
              if (ix < 0 || ix >= x.w()) continue;
              const float v = in[static_cast<std::size_t>(iy) * x.w() + ix];
              if (spec.mode == PoolMode::Max) {
                acc = std::max(acc, v);
              } else {
                acc += v;
              }
            }
          }
          out[static_cast<std::size_t>(oy) * ow + ox] = spec.mode == PoolMode::Max ? acc : acc / area;
        }
      }
    }
  }
  return y;
}

Tensor upsample_nearest2x(const Tensor& x) {
  Tensor y({x.n(), x.c(), 2 * x.h(), 2 * x.w()});
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* in = x.plane(n, c);
      float* out = y.plane(n, c);
      for (int oy = 0; oy < y.h(); ++oy) {
        const float* irow = in + static_cast<std::size_t>(oy / 2) * x.w();
        float* orow = out + static_cast<std::size_t>(oy) * y.w();
        for (int ox = 0; ox < y.w(); ++ox) orow[ox] = irow[ox / 2];
      }
    }
  }
  return y;
}

Tensor concat_channels(std::span<const Tensor> xs) {
  if (xs.empty()) throw SpecError("concat_channels: no inputs");
  const Dims first = xs.front().dims();
  int channels = 0;
  for (const auto& t : xs) {
    if (t.n() != first.n || t.h() != first.h || t.w() != first.w) {
      throw ShapeError(fmt::format("concat_channels: {} incompatible with {}", to_string(t.dims()),
                                   to_string(first)));
    }
    channels += t.c();
  }
  Tensor y({first.n, channels, first.h, first.w});
  const std::size_t plane = first.plane();
  for (int n = 0; n < first.n; ++n) {
    int c0 = 0;
    for (const auto& t : xs) {
      std::copy_n(t.plane(n, 0), plane * t.c(), y.plane(n, c0));
      c0 += t.c();
    }
  }
  return y;
}

Tensor slice_channels(const Tensor& x, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > x.c()) {
    throw SpecError(fmt::format("slice_channels: [{}, {}) outside {} channels", begin,
                                begin + count, x.c()));
  }
  Tensor y({x.n(), count, x.h(), x.w()});
  const std::size_t plane = x.dims().plane();
  for (int n = 0; n < x.n(); ++n) {
    if (count > 0) std::copy_n(x.plane(n, begin), plane * count, y.plane(n, 0));
  }
  return y;
}

std::vector<Tensor> split_channels(const Tensor& x, std::span<const int> sizes) {
  const long total = std::accumulate(sizes.begin(), sizes.end(), 0L);
  if (total != x.c()) {
    throw SpecError(fmt::format("split_channels: sizes sum to {}, tensor has {} channels", total,
                                x.c()));
  }
  std::vector<Tensor> parts;
  parts.reserve(sizes.size());
  int begin = 0;
  for (int s : sizes) {
    parts.push_back(slice_channels(x, begin, s));
    begin += s;
  }
  return parts;
}

Tensor softmax_channelwise(const Tensor& x, int group) {
  if (group <= 0 || x.c() % group != 0) {
    throw SpecError(
        fmt::format("softmax_channelwise: {} channels not divisible by group {}", x.c(), group));
  }
  Tensor y(x.dims());
  const std::size_t plane = x.dims().plane();
  std::vector<float> buf(static_cast<std::size_t>(group));
  for (int n = 0; n < x.n(); ++n) {
    for (int g0 = 0; g0 < x.c(); g0 += group) {
      for (std::size_t p = 0; p < plane; ++p) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int k = 0; k < group; ++k) mx = std::max(mx, x.plane(n, g0 + k)[p]);
        double sum = 0.0;
        for (int k = 0; k < group; ++k) {
          buf[k] = std::exp(x.plane(n, g0 + k)[p] - mx);
          sum += buf[k];
        }
        for (int k = 0; k < group; ++k) {
          y.plane(n, g0 + k)[p] = static_cast<float>(buf[k] / sum);
        }
      }
    }
  }
  return y;
}

Tensor elementwise(const Tensor& x, const Tensor& y, ElementwiseOp op) {
  require_same_dims(x, y, op == ElementwiseOp::Mul ? "mul" : "add");
  Tensor z(x.dims());
  auto a = x.data();
  auto b = y.data();
  auto out = z.data();
  if (op == ElementwiseOp::Mul) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  }
  return z;
}

Tensor scale(const Tensor& x, float factor) {
  Tensor y(x.dims());
  auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor;
  return y;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_dims(a, b, "max_abs_diff");
  float m = 0.0f;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::fabs(x[i] - y[i]));
  return m;
}

}  // namespace repdet
