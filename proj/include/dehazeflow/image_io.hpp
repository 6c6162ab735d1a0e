#pragma once

// Image files <-> [1, 3, H, W] tensors with values in [0, 1].
// Binary/ASCII portable pixmaps (P6/P3, 8 or 16 bit) are always available;
// PNG goes through libpng.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dehazeflow/error.hpp"
#include "dehazeflow/tensor.hpp"

namespace dehazeflow {

enum class ImageFormat : std::uint8_t { kPpm, kPng };

inline ImageFormat image_format_for(const std::string& path) {
  const auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == "ppm" || ext == "pnm") return ImageFormat::kPpm;
  if (ext == "png") return ImageFormat::kPng;
  throw FormatError("unsupported image extension '." + ext + "' in " + path + " (use .ppm or .png)");
}

namespace detail {

template <class T>
T quantize(T v, unsigned maxval) {
  return std::round(std::clamp(v, T(0), T(1)) * static_cast<T>(maxval));
}

inline void require_image(const Shape4& s, const char* what) {
  if (s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0) {
    throw ShapeError(std::string(what) + ": expected a [1,3,H,W] image, got " + s.str());
  }
}

// Next header token of a pixmap, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& is, const std::string& path) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw FormatError("truncated pixmap header in " + path);
  return tok;
}

inline std::size_t pnm_number(std::istream& is, const std::string& path) {
  const std::string tok = pnm_token(is, path);
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(tok, &used);
    if (used != tok.size()) throw FormatError("");
    return v;
  } catch (const std::exception&) {
    throw FormatError("bad pixmap header field '" + tok + "' in " + path);
  }
}

template <class T>
Tensor<T> load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  const std::string magic = pnm_token(is, path);
  if (magic != "P6" && magic != "P3") {
    throw FormatError(path + ": not an RGB pixmap (magic '" + magic + "')");
  }
  const std::size_t w = pnm_number(is, path);
  const std::size_t h = pnm_number(is, path);
  const std::size_t maxval = pnm_number(is, path);
  if (w == 0 || h == 0) throw FormatError(path + ": empty image");
  if (maxval == 0 || maxval > 65535) throw FormatError(path + ": maxval out of range");
  Tensor<T> out(Shape4{1, 3, h, w});
  const T scale = T(1) / static_cast<T>(maxval);
  const std::size_t plane = h * w;
  if (magic == "P3") {
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t v = pnm_number(is, path);
        if (v > maxval) throw FormatError(path + ": sample exceeds maxval");
        out[c * plane + p] = static_cast<T>(v) * scale;
      }
    return out;
  }
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(plane * 3 * bytes);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw FormatError(path + ": truncated pixel data");
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t i = (p * 3 + c) * bytes;
      const unsigned v = bytes == 2 ? (unsigned(raw[i]) << 8) | raw[i + 1] : raw[i];
      if (v > maxval) throw FormatError(path + ": sample exceeds maxval");
      out[c * plane + p] = static_cast<T>(v) * scale;
    }
  return out;
}

template <class T>
void save_ppm(const Tensor<T>& img, const std::string& path, unsigned bit_depth) {
  const Shape4 s = img.shape();
  const unsigned maxval = bit_depth == 16 ? 65535u : 255u;
  const std::size_t bytes = bit_depth == 16 ? 2 : 1;
  const std::size_t plane = s.plane();
  std::vector<unsigned char> raw(plane * 3 * bytes);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const auto v = static_cast<unsigned>(quantize(img[c * plane + p], maxval));
      const std::size_t i = (p * 3 + c) * bytes;
      if (bytes == 2) {
        raw[i] = static_cast<unsigned char>(v >> 8);
        raw[i + 1] = static_cast<unsigned char>(v & 0xff);
      } else {
        raw[i] = static_cast<unsigned char>(v);
      }
    }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << "P6\n" << s.w << ' ' << s.h << '\n' << maxval << '\n';
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw IoError("write failed for " + path);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngRows {
  std::vector<unsigned char> raw;
  std::vector<png_bytep> rows;
};

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

inline void png_warn(png_structp, png_const_charp) {}

template <class T>
Tensor<T> load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path + ": not a PNG file");
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  if (!png) throw IoError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  // buffers live on the heap so a longjmp back here leaves nothing indeterminate
  auto buf = std::make_unique<PngRows>();
  auto& raw = buf->raw;
  auto& rows = buf->rows;
  png_uint_32 w = 0, h = 0;
  int depth = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path + ": " + (err.empty() ? "corrupt PNG" : err));
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  int color = png_get_color_type(png, info);
  depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<T> out(Shape4{1, 3, h, w});
  const std::size_t plane = std::size_t(h) * w;
  const T scale = T(1) / static_cast<T>(depth == 16 ? 65535 : 255);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = y * rowbytes + (x * 3 + c) * (depth == 16 ? 2 : 1);
        unsigned v = raw[i];
        if (depth == 16) v |= unsigned(raw[i + 1]) << 8;
        out[c * plane + y * w + x] = static_cast<T>(v) * scale;
      }
  return out;
}

template <class T>
void save_png(const Tensor<T>& img, const std::string& path, unsigned bit_depth) {
  const Shape4 s = img.shape();
  const std::size_t bytes = bit_depth == 16 ? 2 : 1;
  const unsigned maxval = bit_depth == 16 ? 65535u : 255u;
  const std::size_t plane = s.plane();
  const std::size_t rowbytes = s.w * 3 * bytes;
  std::vector<unsigned char> raw(rowbytes * s.h);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const auto v = static_cast<unsigned>(quantize(img[c * plane + p], maxval));
      const std::size_t i = (p * 3 + c) * bytes;
      if (bytes == 2) {
        raw[i] = static_cast<unsigned char>(v >> 8);
        raw[i + 1] = static_cast<unsigned char>(v & 0xff);
      } else {
        raw[i] = static_cast<unsigned char>(v);
      }
    }
  std::vector<png_bytep> rows(s.h);
  for (std::size_t y = 0; y < s.h; ++y) rows[y] = raw.data() + y * rowbytes;

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path);
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  if (!png) throw IoError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path + ": " + (err.empty() ? "PNG write failed" : err));
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(s.w), static_cast<png_uint_32>(s.h),
               static_cast<int>(bit_depth == 16 ? 16 : 8), PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Read an RGB image; the format follows the file extension.
template <class T = float>
Tensor<T> load_image(const std::string& path) {
  return image_format_for(path) == ImageFormat::kPng ? detail::load_png<T>(path)
                                                     : detail::load_ppm<T>(path);
}

/// Write a [1,3,H,W] image. Values are clamped to [0, 1] and rounded to the
/// nearest code of the chosen bit depth (8 or 16).
template <class T>
void save_image(const Tensor<T>& img, const std::string& path, unsigned bit_depth = 8) {
  detail::require_image(img.shape(), "save_image");
  if (bit_depth != 8 && bit_depth != 16) {
    throw DomainError("save_image: bit depth must be 8 or 16, got " + std::to_string(bit_depth));
  }
  if (image_format_for(path) == ImageFormat::kPng) {
    detail::save_png(img, path, bit_depth);
  } else {
    detail::save_ppm(img, path, bit_depth);
  }
}

}  // namespace dehazeflow
