#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "patchguard/nd/array.hpp"

namespace patchguard {

/// H x W x C values in [0, 1], row-major.
using Image = nd::Array;
/// H x W binary map.
using Mask = nd::Array;

inline std::size_t height(const Image& im) { return im.shape.at(0); }
inline std::size_t width(const Image& im) { return im.shape.at(1); }
inline std::size_t channels(const Image& im) { return im.shape.size() > 2 ? im.shape[2] : 1; }

inline void check_image(const Image& im, const char* who) {
  if (im.shape.size() != 3 || im.shape[0] == 0 || im.shape[1] == 0 || im.shape[2] == 0)
    throw nd::ShapeError(std::string(who) + ": expected non-empty HxWxC image, got " +
                         nd::to_string(im.shape));
}

inline double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

inline void clip01(Image& im) {
  for (auto& v : im.data) v = clip01(v);
}

inline double& at(Image& im, std::size_t y, std::size_t x, std::size_t c) {
  return im.data[(y * im.shape[1] + x) * im.shape[2] + c];
}
inline double at(const Image& im, std::size_t y, std::size_t x, std::size_t c) {
  return im.data[(y * im.shape[1] + x) * im.shape[2] + c];
}

/// Bilinear sample at fractional (y, x); coordinates are clamped to the image.
inline double sample_bilinear(const Image& im, double y, double x, std::size_t c) {
  const double ymax = static_cast<double>(height(im) - 1);
  const double xmax = static_cast<double>(width(im) - 1);
  y = std::clamp(y, 0.0, ymax);
  x = std::clamp(x, 0.0, xmax);
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, height(im) - 1);
  const std::size_t x1 = std::min(x0 + 1, width(im) - 1);
  const double wy = y - static_cast<double>(y0);
  const double wx = x - static_cast<double>(x0);
  const double top = at(im, y0, x0, c) * (1.0 - wx) + at(im, y0, x1, c) * wx;
  const double bot = at(im, y1, x0, c) * (1.0 - wx) + at(im, y1, x1, c) * wx;
  return top * (1.0 - wy) + bot * wy;
}

/// Corner-aligned bilinear resize of an HxWxC image.
inline Image resize_bilinear(const Image& im, std::size_t out_h, std::size_t out_w) {
  Image out({out_h, out_w, channels(im)});
  const double sy = out_h > 1 ? static_cast<double>(height(im) - 1) / static_cast<double>(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(width(im) - 1) / static_cast<double>(out_w - 1) : 0.0;
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      for (std::size_t c = 0; c < channels(im); ++c)
        at(out, y, x, c) = sample_bilinear(im, static_cast<double>(y) * sy, static_cast<double>(x) * sx, c);
  return out;
}

/// Nearest-neighbour resize of an HxW mask; keeps values binary.
inline Mask resize_nearest(const Mask& m, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = m.shape.at(0), w = m.shape.at(1);
  Mask out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(h - 1, (y * h) / out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(w - 1, (x * w) / out_w);
      out.data[y * out_w + x] = m.data[sy * w + sx];
    }
  }
  return out;
}

/// Copies the rectangle [y0, y0+h) x [x0, x0+w).
inline Image crop(const Image& im, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > height(im) || x0 + w > width(im) || h == 0 || w == 0)
    throw std::invalid_argument("crop: rectangle outside image");
  Image out({h, w, channels(im)});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels(im); ++c) at(out, y, x, c) = at(im, y0 + y, x0 + x, c);
  return out;
}

inline Mask zeros_mask(std::size_t h, std::size_t w) { return Mask({h, w}, 0.0); }

inline std::size_t mask_count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](double v) { return v > 0.5; }));
}

}  // namespace patchguard
