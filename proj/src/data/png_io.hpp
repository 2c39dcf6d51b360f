#pragma once
// Thin libpng wrappers: 8-bit grayscale/RGB files in, interleaved byte
// buffers out. Anything deeper (16-bit, palette, tRNS) is expanded to 8-bit
// on read.

#include <cstdint>
#include <string>
#include <vector>

namespace ssgan {

struct PngImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;               // 1, 3, or 4 after expansion
  std::vector<std::uint8_t> pixels;       // row-major, channels interleaved
};

PngImage read_png(const std::string& path);

/// Writes an 8-bit grayscale (channels = 1) or RGB (channels = 3) PNG.
void write_png(const std::string& path, std::size_t width, std::size_t height,
               std::size_t channels, const std::vector<std::uint8_t>& pixels);

}  // namespace ssgan
