#pragma once

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "derefl/common.hpp"
#include "derefl/image.hpp"

namespace derefl {

// 8-bit RGB PNG is the only on-disk image format. Reading maps byte v to
// v/255; writing rounds half-up to the nearest of 256 levels. Quantization
// happens here and nowhere else.

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline EncodedImage read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("read_png: cannot open " + path);

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8)) {
    throw IoError("read_png: not a PNG file: " + path);
  }

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: libpng init failed");
  }

  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: decode failed for " + path);
  }

  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  int bit_depth = 0, color_type = 0;
  png_get_IHDR(png, info, &width, &height, &bit_depth, &color_type, nullptr, nullptr, nullptr);

  // Normalize every input variant to 8-bit RGB.
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  if (color_type & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);

  const std::size_t rowbytes = png_get_rowbytes(png, info);
  pixels.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  EncodedImage img(static_cast<int>(height), static_cast<int>(width));
  for (png_uint_32 y = 0; y < height; ++y) {
    const png_byte* row = pixels.data() + y * rowbytes;
    for (png_uint_32 x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(static_cast<int>(y), static_cast<int>(x), c) = row[x * 3 + c] / 255.0;
      }
    }
  }
  return img;
}

inline void write_png(const std::string& path, const EncodedImage& img) {
  if (img.height < 1 || img.width < 1) {
    throw std::invalid_argument("write_png: empty image");
  }
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: libpng init failed");
  }

  std::vector<png_byte> pixels(static_cast<std::size_t>(img.height) * img.width * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = img.at(y, x, c);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        // round half-up to the nearest of 256 levels
        int q = static_cast<int>(v * 255.0 + 0.5);
        if (q > 255) q = 255;
        pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] =
            static_cast<png_byte>(q);
      }
    }
  }
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) {
    rows[y] = pixels.data() + static_cast<std::size_t>(y) * img.width * 3;
  }

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: encode failed for " + path);
  }

  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// write_png via a temp file and rename, so readers never see partial output.
inline void write_png_atomic(const std::string& path, const EncodedImage& img) {
  atomic_write(path, [&](const std::filesystem::path& tmp) {
    write_png(tmp.string(), img);
  });
}

}  // namespace derefl
