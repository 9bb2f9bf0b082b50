// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <array>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "unirag/common.hpp"

namespace unirag {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

/// Row-major RGB8 pixels.
struct RgbImage {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::uint32_t w, std::uint32_t h, Rgb fill = {})
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3) {
    for (std::size_t i = 0; i < pixels.size(); i += 3) {
      pixels[i] = fill.r;
      pixels[i + 1] = fill.g;
      pixels[i + 2] = fill.b;
    }
  }

  void validate() const {
    if (pixels.size() != static_cast<std::size_t>(width) * height * 3) {
      throw ValidationError("RGB buffer length does not match " + std::to_string(width) + "x" +
                            std::to_string(height));
    }
  }

  Rgb at(std::uint32_t x, std::uint32_t y) const {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Stacks images top to bottom, left-aligned. The result is as wide as the
/// widest input and as tall as all inputs together; columns to the right of a
/// narrower image are filled with `background`.
inline RgbImage merge_images(std::span<const RgbImage> images, Rgb background = {}) {
  if (images.empty()) throw ValidationError("merge_images needs at least one image");
  std::uint32_t width = 0;
  std::uint64_t height = 0;
  for (const auto& img : images) {
    img.validate();
    width = std::max(width, img.width);
    height += img.height;
  }
  if (height > 0xFFFFFFFFULL) throw ValidationError("merged image too tall");
  RgbImage out(width, static_cast<std::uint32_t>(height), background);
  std::size_t row = 0;
  for (const auto& img : images) {
    const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
    for (std::uint32_t y = 0; y < img.height; ++y, ++row) {
      std::memcpy(out.pixels.data() + row * width * 3, img.pixels.data() + y * stride, stride);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Codecs.

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

/// "image/png", "image/jpeg", or empty when the bytes are neither.
inline std::string sniff_media_type(std::string_view bytes) {
  static constexpr std::array<unsigned char, 8> kPng{0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPng.data(), 8) == 0) return "image/png";
  if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xFF &&
      static_cast<unsigned char>(bytes[1]) == 0xD8 && static_cast<unsigned char>(bytes[2]) == 0xFF) {
    return "image/jpeg";
  }
  return {};
}

inline RgbImage decode_png(std::string_view bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw ValidationError(std::string("PNG decode failed: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = img.width;
  out.height = img.height;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ValidationError(std::string("PNG decode failed: ") + img.message);
  }
  return out;
}

inline std::string encode_png(const RgbImage& image) {
  image.validate();
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = image.width;
  img.height = image.height;
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw Error(std::string("PNG encode failed: ") + img.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw Error(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

namespace detail {

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace detail

inline RgbImage decode_jpeg(std::string_view bytes) {
  jpeg_decompress_struct cinfo;
  detail::JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_error_exit;
  RgbImage out;
  // Nothing with a destructor may be created between setjmp and the last
  // libjpeg call; `out` is constructed above.
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ValidationError(std::string("JPEG decode failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()),
               static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

inline RgbImage decode_image(std::string_view bytes) {
  const std::string type = sniff_media_type(bytes);
  if (type == "image/png") return decode_png(bytes);
  if (type == "image/jpeg") return decode_jpeg(bytes);
  throw ValidationError("unsupported image format");
}

inline RgbImage load_image(const std::string& path) { return decode_image(read_file_bytes(path)); }

}  // namespace unirag
