#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace repdet {

struct StoredTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t count() const;
  bool operator==(const StoredTensor&) const = default;
};

// Named parameter tensors, iterated in name order.
class WeightStore {
 public:
  using Map = std::map<std::string, StoredTensor, std::less<>>;

  void set(std::string name, StoredTensor t);
  bool contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }
  const StoredTensor* find(std::string_view name) const;
  // Throws ValidationError naming the tensor when absent.
  const StoredTensor& at(std::string_view name) const;
  StoredTensor& at(std::string_view name);
  void erase(std::string_view name);

  std::size_t size() const { return tensors_.size(); }
  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }

  bool operator==(const WeightStore&) const = default;

 private:
  Map tensors_;
};

// Binary container, little-endian:
//   "RWT1" | u32 count | count x { u16 name_len | name | u8 rank | rank x u32 dims |
//   product(dims) x f32 }
std::vector<std::uint8_t> encode_weights(const WeightStore& store);
// Throws FormatError (with byte offset) on bad magic, truncation or trailing bytes.
WeightStore decode_weights(std::span<const std::uint8_t> bytes);

// Writes through a temporary file and renames it into place.
void save_weights(const WeightStore& store, const std::filesystem::path& path);
WeightStore load_weights(const std::filesystem::path& path);

// Whole-file helpers shared by the other writers.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace repdet
