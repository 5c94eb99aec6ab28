#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchguard/image.hpp"

namespace patchguard::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(clip01(v) * 255.0)); }

/// Reads a PNG as RGB (channels = 3) or grayscale (channels = 1), values in [0, 1].
inline Image read_png(const std::filesystem::path& path, std::size_t channels = 3) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("read_png: channels must be 1 or 3");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read PNG '" + path.string() + "': " + img.message);
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG '" + path.string() + "': " + img.message);
  }
  Image out({img.height, img.width, channels});
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = buf[i] / 255.0;
  return out;
}

/// Writes an HxWxC (C = 1 or 3) or HxW array as an 8-bit PNG.
inline void write_png(const std::filesystem::path& path, const nd::Array& im) {
  const std::size_t c = im.rank() == 2 ? 1 : im.shape.at(2);
  if ((im.rank() != 2 && im.rank() != 3) || (c != 1 && c != 3))
    throw nd::ShapeError("write_png: expected HxW, HxWx1 or HxWx3, got " + nd::to_string(im.shape));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::vector<std::uint8_t> buf(im.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_byte(im.data[i]);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.shape[1]);
  img.height = static_cast<png_uint_32>(im.shape[0]);
  img.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write PNG '" + path.string() + "': " + img.message);
}

/// Reads a grayscale mask and binarizes it at 0.5.
inline Mask read_mask(const std::filesystem::path& path) {
  Image g = read_png(path, 1);
  Mask m({height(g), width(g)});
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = g.data[i] >= 0.5 ? 1.0 : 0.0;
  return m;
}

/// Writes a binary mask as 0/255.
inline void write_mask(const std::filesystem::path& path, const Mask& m) {
  Mask b(m.shape);
  for (std::size_t i = 0; i < m.size(); ++i) b.data[i] = m.data[i] >= 0.5 ? 1.0 : 0.0;
  write_png(path, b);
}

}  // namespace patchguard::io
