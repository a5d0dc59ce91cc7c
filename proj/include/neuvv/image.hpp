#pragma once

/// \file
/// Minimal planar-interleaved image container with 8-bit PNG and float PFM
/// file support.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "neuvv/errors.hpp"

namespace neuvv {

template <class T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c, T fill = T(0))
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t index(int x, int y, int ch = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + ch;
  }
  T& at(int x, int y, int ch = 0) { return data[index(x, y, ch)]; }
  const T& at(int x, int y, int ch = 0) const { return data[index(x, y, ch)]; }
  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
  bool same_shape(int w, int h) const { return width == w && height == h; }

  template <class U>
  Image<U> cast() const {
    Image<U> out(width, height, channels);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

using ImageF = Image<float>;
using ImageD = Image<double>;

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Rounds every value to the nearest 8-bit level, as PNG storage would.
template <class T>
void quantize_u8(Image<T>& img) {
  for (auto& v : img.data) v = static_cast<T>(to_u8(static_cast<double>(v)) / 255.0);
}

/// Encodes 1, 3 or 4 channel images with values in [0, 1] as 8-bit PNG.
template <class T>
std::vector<std::uint8_t> encode_png(const Image<T>& img) {
  if (img.channels != 1 && img.channels != 3 && img.channels != 4)
    throw InvalidArgument("encode_png: unsupported channel count " + std::to_string(img.channels));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("encode_png: libpng failure");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t len) {
        auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        v->insert(v->end(), data, data + len);
      },
      nullptr);
  const int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_RGBA;
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        row[static_cast<std::size_t>(x) * img.channels + c] = to_u8(static_cast<double>(img.at(x, y, c)));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

/// Decodes an 8-bit PNG into values k / 255. Palette and 16-bit inputs are
/// converted by libpng.
inline ImageF decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw IoError(std::string("decode_png: ") + image.message);
  int channels = 3;
  if (image.format & PNG_FORMAT_FLAG_ALPHA) channels = 4;
  if (!(image.format & PNG_FORMAT_FLAG_COLOR)) channels = (image.format & PNG_FORMAT_FLAG_ALPHA) ? 2 : 1;
  if (channels == 2) channels = 4;
  image.format = channels == 1 ? PNG_FORMAT_GRAY : channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError(std::string("decode_png: ") + image.message);
  }
  ImageF out(static_cast<int>(image.width), static_cast<int>(image.height), channels);
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = static_cast<float>(buf[i] / 255.0);
  return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

template <class T>
void write_png(const std::filesystem::path& path, const Image<T>& img) {
  write_file(path, encode_png(img));
}

inline ImageF read_png(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing file: " + path.string());
  return decode_png(read_file(path));
}

/// Portable float map: "PF" (3 channels) or "Pf" (1 channel), little-endian
/// scale -1, rows stored bottom to top.
template <class T>
void write_pfm(const std::filesystem::path& path, const Image<T>& img) {
  if (img.channels != 1 && img.channels != 3) throw InvalidArgument("write_pfm: needs 1 or 3 channels");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << (img.channels == 3 ? "PF" : "Pf") << "\n" << img.width << " " << img.height << "\n-1.0\n";
  for (int y = img.height - 1; y >= 0; --y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const float v = static_cast<float>(img.at(x, y, c));
        f.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
  if (!f) throw IoError("write failed: " + path.string());
}

inline ImageF read_pfm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  f >> magic >> w >> h >> scale;
  f.get();
  if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0) throw IoError("read_pfm: malformed header in " + path.string());
  if (scale > 0) throw IoError("read_pfm: big-endian PFM not supported");
  ImageF img(w, h, magic == "PF" ? 3 : 1);
  for (int y = h - 1; y >= 0; --y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels; ++c) f.read(reinterpret_cast<char*>(&img.at(x, y, c)), sizeof(float));
  if (!f) throw IoError("read_pfm: truncated data in " + path.string());
  return img;
}

}  // namespace neuvv
