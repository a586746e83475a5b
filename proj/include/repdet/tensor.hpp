#pragma once

#include <compare>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace repdet {

// NCHW extents.
struct Dims {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
           static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }

  auto operator<=>(const Dims&) const = default;
};

std::string to_string(const Dims& d);

// Dense 4-D float tensor, row-major with the last (w) axis fastest.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Dims dims, float fill = 0.0f);
  Tensor(Dims dims, std::vector<float> values);

  const Dims& dims() const { return dims_; }
  int n() const { return dims_.n; }
  int c() const { return dims_.c; }
  int h() const { return dims_.h; }
  int w() const { return dims_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& values() { return data_; }
  const std::vector<float>& values() const { return data_; }

  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * dims_.c + c) * dims_.h + y) * dims_.w + x;
  }
  float& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  float at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  float* plane(int n, int c) { return data_.data() + offset(n, c, 0, 0); }
  const float* plane(int n, int c) const { return data_.data() + offset(n, c, 0, 0); }

  bool operator==(const Tensor&) const = default;

 private:
  Dims dims_{};
  std::vector<float> data_;
};

// Convolution hyper-parameters. Padding is per axis so strip kernels (1xL, Lx1)
// can pad only along their long side.
struct Conv2dSpec {
  int in_ch = 1;
  int out_ch = 1;
  int kh = 1;
  int kw = 1;
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
  int dilation = 1;
  int groups = 1;
  bool has_bias = false;

  // Square kernel with "same" padding for stride 1.
  static Conv2dSpec square(int in_ch, int out_ch, int k, int stride = 1, int groups = 1,
                           bool has_bias = false);

  Dims weight_dims() const { return {out_ch, in_ch / groups, kh, kw}; }
  std::size_t weight_count() const { return weight_dims().count(); }
  int out_h(int h) const { return (h + 2 * pad_h - dilation * (kh - 1) - 1) / stride + 1; }
  int out_w(int w) const { return (w + 2 * pad_w - dilation * (kw - 1) - 1) / stride + 1; }

  // Throws SpecError on non-positive sizes or channels not divisible by groups.
  void validate() const;

  bool operator==(const Conv2dSpec&) const = default;
};

inline constexpr float kDefaultBatchNormEps = 1e-3f;

struct BatchNormParams {
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float eps = kDefaultBatchNormEps;

  static BatchNormParams identity(int channels, float eps = kDefaultBatchNormEps);
  int channels() const { return static_cast<int>(gamma.size()); }
  void validate() const;

  bool operator==(const BatchNormParams&) const = default;
};

enum class PoolMode { Max, Avg };

struct PoolSpec {
  PoolMode mode = PoolMode::Max;
  int kernel = 1;
  int stride = 1;
  int padding = 0;

  bool operator==(const PoolSpec&) const = default;
};

}  // namespace repdet
