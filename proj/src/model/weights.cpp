#include "repdet/weights.hpp"

#include <fmt/format.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "repdet/errors.hpp"

namespace repdet {
namespace {

constexpr char kMagic[4] = {'R', 'W', 'T', '1'};

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(fmt::format("truncated weight file while reading {}", what), pos_);
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return take(1, what)[0]; }
  std::uint16_t u16(const char* what) {
    auto s = take(2, what);
    return static_cast<std::uint16_t>(s[0] | (s[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[i]) << (8 * i);
    return v;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t StoredTensor::count() const {
  std::size_t p = 1;
  for (auto d : dims) p *= d;
  return p;
}

void WeightStore::set(std::string name, StoredTensor t) {
  if (t.values.size() != t.count()) {
    throw ShapeError(fmt::format("tensor '{}' has {} values for dims of {} elements", name,
                                 t.values.size(), t.count()));
  }
  tensors_.insert_or_assign(std::move(name), std::move(t));
}

const StoredTensor* WeightStore::find(std::string_view name) const {
  auto it = tensors_.find(name);
  return it == tensors_.end() ? nullptr : &it->second;
}

const StoredTensor& WeightStore::at(std::string_view name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ValidationError(fmt::format("missing tensor '{}'", name));
  return it->second;
}

StoredTensor& WeightStore::at(std::string_view name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ValidationError(fmt::format("missing tensor '{}'", name));
  return it->second;
}

void WeightStore::erase(std::string_view name) {
  auto it = tensors_.find(name);
  if (it != tensors_.end()) tensors_.erase(it);
}

std::vector<std::uint8_t> encode_weights(const WeightStore& store) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw SpecError(fmt::format("tensor name too long ({} bytes)", name.size()));
    }
    if (t.dims.size() > std::numeric_limits<std::uint8_t>::max()) {
      throw SpecError(fmt::format("tensor '{}' rank {} too large", name, t.dims.size()));
    }
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u8(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(out, d);
    for (float v : t.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

WeightStore decode_weights(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected RWT1", 0);
  const std::uint32_t count = r.u32("tensor count");
  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.offset();
    const std::uint16_t len = r.u16("name length");
    auto name_bytes = r.take(len, "tensor name");
    std::string name(name_bytes.begin(), name_bytes.end());
    if (store.contains(name)) throw FormatError(fmt::format("duplicate tensor '{}'", name), start);
    const std::uint8_t rank = r.u8("rank");
    StoredTensor t;
    std::uint64_t elements = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.u32("dims"));
      elements *= t.dims.back();
    }
    if (elements * 4 > bytes.size() - r.offset()) {
      throw FormatError(fmt::format("truncated data for tensor '{}'", name), r.offset());
    }
    t.values.resize(static_cast<std::size_t>(elements));
    for (auto& v : t.values) v = std::bit_cast<float>(r.u32("tensor data"));
    store.set(std::move(name), std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after last tensor", r.offset());
  return store;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError(fmt::format("read failure on '{}'", path.string()));
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", tmp.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError(fmt::format("write failure on '{}'", tmp.string()));
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError(fmt::format("cannot move output into '{}'", path.string()));
  }
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_weights(const WeightStore& store, const std::filesystem::path& path) {
  write_file_atomic(path, encode_weights(store));
}

WeightStore load_weights(const std::filesystem::path& path) { return decode_weights(read_file_bytes(path)); }

}  // namespace repdet
