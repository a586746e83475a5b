#include "repdet/image.hpp"

#include <fmt/format.h>

#include <cctype>
#include <string>

#include "repdet/errors.hpp"
#include "repdet/weights.hpp"

namespace repdet {

Image::Image(int w, int h, std::uint8_t fill)
    : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {
  if (w < 0 || h < 0) throw SpecError("image dimensions must be non-negative");
}

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> b) : b_(b) {}

  std::size_t pos() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > 1'000'000) throw FormatError(fmt::format("PPM {} is too large", what), start);
      ++pos_;
    }
    if (pos_ == start) throw FormatError(fmt::format("PPM header: expected {}", what), start);
    return v;
  }

  void single_whitespace() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) {
      throw FormatError("PPM header must end with one whitespace byte", pos_);
    }
    ++pos_;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 2;
};

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw FormatError("not a binary PPM (expected P6)", 0);
  }
  HeaderReader r(bytes);
  const long w = r.number("width");
  const long h = r.number("height");
  const std::size_t maxval_at = r.pos();
  const long maxval = r.number("maxval");
  if (maxval != 255) throw FormatError(fmt::format("unsupported PPM maxval {}", maxval), maxval_at);
  r.single_whitespace();
  if (w < 1 || h < 1) throw FormatError("PPM image has zero width or height", 0);
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() - r.pos() < need) {
    throw FormatError(fmt::format("PPM pixel data truncated: need {} bytes, have {}", need,
                                  bytes.size() - r.pos()),
                      bytes.size());
  }
  if (bytes.size() - r.pos() > need) throw FormatError("trailing bytes after PPM pixel data", r.pos() + need);
  Image img(static_cast<int>(w), static_cast<int>(h));
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos()), need, img.rgb.begin());
  return img;
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  if (img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
    throw ShapeError("image pixel buffer does not match its dimensions");
  }
  const std::string header = fmt::format("P6\n{} {}\n255\n", img.width, img.height);
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

Image read_ppm(const std::filesystem::path& path) {
  try {
    return decode_ppm(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string(), e);
  }
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  write_file_atomic(path, encode_ppm(img));
}

}  // namespace repdet
