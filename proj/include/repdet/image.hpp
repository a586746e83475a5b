#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace repdet {

// Interleaved 8-bit RGB, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0);

  std::uint8_t& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

// Binary PPM (P6, maxval 255). Header comments are skipped.
Image decode_ppm(std::span<const std::uint8_t> bytes);  // throws FormatError
std::vector<std::uint8_t> encode_ppm(const Image& img);
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const Image& img, const std::filesystem::path& path);

}  // namespace repdet
