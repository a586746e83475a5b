#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>

#include "repdet/block_params.hpp"
#include "repdet/weights.hpp"

namespace repdet::testing {

// Fills every tensor of a block with seeded values: gamma in [0.5, 1.5],
// var in [0.25, 2], everything else in +-scale (conv weights by fan-in).
template <class B>
void randomize_block(B& blk, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> sym(-1.0f, 1.0f);
  std::uniform_real_distribution<float> pos(0.5f, 1.5f);
  std::uniform_real_distribution<float> var(0.25f, 2.0f);
  visit_params(blk, "", [&](const std::string& name, const ParamShape& shape, std::span<float> v, ParamRole) {
    float k = 0.3f;
    if (shape.size() == 4) k = 1.0f / std::sqrt(float(shape[1] * shape[2] * shape[3]));
    for (auto& x : v) {
      if (name.ends_with(".gamma")) x = pos(rng);
      else if (name.ends_with(".var")) x = var(rng);
      else if (name.find(".scale.") != std::string::npos) x = pos(rng);
      else x = k * sym(rng);
    }
  });
}

// Copies the tensors stored under `prefix` into the block.
template <class B>
void bind_from_store(B& blk, const std::string& prefix, const WeightStore& store) {
  visit_params(blk, prefix, [&](const std::string& name, const ParamShape& shape, std::span<float> v, ParamRole) {
    const StoredTensor& t = store.at(name);
    ASSERT_EQ(t.dims, shape) << name;
    std::copy(t.values.begin(), t.values.end(), v.begin());
  });
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("repdet_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace repdet::testing
