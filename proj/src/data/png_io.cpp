#include "data/png_io.hpp"

#include <png.h>

#include <cstdio>

#include "core/error.hpp"

namespace ssgan {

// libpng reports errors by longjmp back to the setjmp below, so everything it
// could interrupt keeps its handles in locals declared before the setjmp and
// cleans up manually on both paths.

PngImage read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  require(fp != nullptr, ErrCode::io, "read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (info == nullptr) {
    if (png != nullptr) png_destroy_read_struct(&png, nullptr, nullptr);
    std::fclose(fp);
    raise(ErrCode::io, "read_png: libpng initialization failed");
  }

  PngImage out;
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    raise(ErrCode::io, "read_png: failed to decode " + path);
  }

  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);

  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out.pixels.resize(stride * out.height);
  row_ptrs.resize(out.height);
  for (std::size_t r = 0; r < out.height; ++r) row_ptrs[r] = out.pixels.data() + r * stride;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);

  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out;
}

void write_png(const std::string& path, std::size_t width, std::size_t height,
               std::size_t channels, const std::vector<std::uint8_t>& pixels) {
  require(channels == 1 || channels == 3, ErrCode::invalid_argument,
          "write_png: only grayscale or RGB supported");
  require(pixels.size() == width * height * channels, ErrCode::shape_mismatch,
          "write_png: " + std::to_string(pixels.size()) + " bytes for " + std::to_string(width) +
              "x" + std::to_string(height) + "x" + std::to_string(channels));

  FILE* fp = std::fopen(path.c_str(), "wb");
  require(fp != nullptr, ErrCode::io, "write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (info == nullptr) {
    if (png != nullptr) png_destroy_write_struct(&png, nullptr);
    std::fclose(fp);
    raise(ErrCode::io, "write_png: libpng initialization failed");
  }

  std::vector<png_bytep> row_ptrs(height);
  for (std::size_t r = 0; r < height; ++r)
    row_ptrs[r] = const_cast<png_bytep>(pixels.data() + r * width * channels);

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    raise(ErrCode::io, "write_png: failed to write " + path);
  }

  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);

  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace ssgan
