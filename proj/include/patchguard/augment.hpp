#pragma once

// Soft (content-preserving) and hard (content-destroying) image transforms.
//
// Sampling ranges used by sample_transforms:
//   ColorJitter        brightness, contrast, saturation factors in [0.8, 1.2]
//   ColorTint          strength in [0, 0.1], tint colour uniform in [0, 1]^3
//   Grayscale          no parameters
//   GaussianNoiseLight sigma in [0, 0.02], noise truncated at +-3 sigma
//   LargeRotation      |degrees| in [60, 180], random sign
//   ExtremeCrop        retained area fraction in [0.1, 0.4], aspect in [0.75, 1.33]
//   Elastic            max displacement in [0.05, 0.15] of the extent, 8x8 control grid
//   HeavyNoise         sigma in [0.2, 0.5]
//   CutoutFill         uniform random fill colour
//
// Per-pixel L-inf bound of each soft kind (see soft_linf_bound).

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "patchguard/image.hpp"
#include "patchguard/rng.hpp"

namespace patchguard::augment {

enum class Kind {
  ColorJitter,
  ColorTint,
  Grayscale,
  GaussianNoiseLight,
  LargeRotation,
  ExtremeCrop,
  Elastic,
  HeavyNoise,
  CutoutFill,
};

enum class Pool { Soft, Hard };

inline constexpr std::array kSoftKinds = {Kind::ColorJitter, Kind::ColorTint, Kind::Grayscale,
                                          Kind::GaussianNoiseLight};
inline constexpr std::array kHardKinds = {Kind::LargeRotation, Kind::ExtremeCrop, Kind::Elastic,
                                          Kind::HeavyNoise, Kind::CutoutFill};

inline bool is_soft(Kind k) {
  return std::find(kSoftKinds.begin(), kSoftKinds.end(), k) != kSoftKinds.end();
}

inline std::string_view kind_name(Kind k) {
  switch (k) {
    case Kind::ColorJitter: return "ColorJitter";
    case Kind::ColorTint: return "ColorTint";
    case Kind::Grayscale: return "Grayscale";
    case Kind::GaussianNoiseLight: return "GaussianNoiseLight";
    case Kind::LargeRotation: return "LargeRotation";
    case Kind::ExtremeCrop: return "ExtremeCrop";
    case Kind::Elastic: return "Elastic";
    case Kind::HeavyNoise: return "HeavyNoise";
    case Kind::CutoutFill: return "CutoutFill";
  }
  return "?";
}

inline Kind kind_from_name(std::string_view s) {
  for (Kind k : kSoftKinds)
    if (kind_name(k) == s) return k;
  for (Kind k : kHardKinds)
    if (kind_name(k) == s) return k;
  throw std::invalid_argument("unknown transform kind '" + std::string(s) + "'");
}

/// Per-pixel L-inf change a soft transform can cause on a [0,1] image.
inline double soft_linf_bound(Kind k) {
  switch (k) {
    case Kind::ColorJitter: return 0.6;  // three stages, each moves a value by <= 0.2
    case Kind::ColorTint: return 0.1;
    case Kind::Grayscale: return 0.886;  // pure blue -> luma 0.114
    case Kind::GaussianNoiseLight: return 0.06;
    default: throw std::invalid_argument("soft_linf_bound: not a soft kind");
  }
}

struct TransformSpec {
  Kind kind = Kind::Grayscale;
  std::map<std::string, double> params;
  std::uint64_t seed = 0;

  double param(const std::string& name, double fallback) const {
    auto it = params.find(name);
    return it == params.end() ? fallback : it->second;
  }

  bool operator==(const TransformSpec&) const = default;
};

inline nlohmann::json to_json(const TransformSpec& s) {
  return {{"kind", kind_name(s.kind)}, {"params", s.params}, {"seed", s.seed}};
}

inline TransformSpec spec_from_json(const nlohmann::json& j) {
  TransformSpec s;
  s.kind = kind_from_name(j.at("kind").get<std::string>());
  s.params = j.at("params").get<std::map<std::string, double>>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

namespace detail {

inline void require_range(const TransformSpec& s, const char* name, double v, double lo, double hi) {
  if (!(v >= lo && v <= hi))
    throw std::invalid_argument(std::string(kind_name(s.kind)) + ": parameter " + name + "=" +
                                std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "]");
}

inline double luma(const Image& im, std::size_t y, std::size_t x) {
  if (channels(im) < 3) return at(im, y, x, 0);
  const double r = at(im, y, x, 0), g = at(im, y, x, 1), b = at(im, y, x, 2);
  if (r == g && g == b) return r;
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

inline double mean_luma(const Image& im) {
  double s = 0.0;
  for (std::size_t y = 0; y < height(im); ++y)
    for (std::size_t x = 0; x < width(im); ++x) s += luma(im, y, x);
  return s / static_cast<double>(height(im) * width(im));
}

inline Image color_jitter(const Image& in, double brightness, double contrast, double saturation) {
  Image out = in;
  for (auto& v : out.data) v = clip01(v * brightness);
  if (contrast != 1.0) {
    const double m = mean_luma(out);
    for (auto& v : out.data) v = clip01(m + (v - m) * contrast);
  }
  if (saturation != 1.0 && channels(out) >= 3) {
    for (std::size_t y = 0; y < height(out); ++y)
      for (std::size_t x = 0; x < width(out); ++x) {
        const double g = luma(out, y, x);
        for (std::size_t c = 0; c < channels(out); ++c)
          at(out, y, x, c) = clip01(g + (at(out, y, x, c) - g) * saturation);
      }
  }
  return out;
}

inline Image rotate(const Image& in, double degrees) {
  const double t = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(t), sn = std::sin(t);
  const double cy = (static_cast<double>(height(in)) - 1.0) / 2.0;
  const double cx = (static_cast<double>(width(in)) - 1.0) / 2.0;
  Image out(in.shape);
  for (std::size_t y = 0; y < height(in); ++y)
    for (std::size_t x = 0; x < width(in); ++x) {
      // Inverse map: rotate the output location back into the source.
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double sy = cy + cs * dy - sn * dx;
      const double sx = cx + sn * dy + cs * dx;
      for (std::size_t c = 0; c < channels(in); ++c) at(out, y, x, c) = sample_bilinear(in, sy, sx, c);
    }
  return out;
}

inline Image extreme_crop(const Image& in, const TransformSpec& s) {
  const double area = s.param("area", 0.25);
  const double aspect = s.param("aspect", 1.0);
  if (!(area > 0.0) || !(aspect > 0.0)) throw std::invalid_argument("ExtremeCrop: degenerate crop (zero area)");
  const double H = static_cast<double>(height(in)), W = static_cast<double>(width(in));
  const auto ch = static_cast<std::size_t>(std::lround(std::min(H, H * std::sqrt(area * aspect))));
  const auto cw = static_cast<std::size_t>(std::lround(std::min(W, W * std::sqrt(area / aspect))));
  if (ch == 0 || cw == 0) throw std::invalid_argument("ExtremeCrop: degenerate crop (zero area)");
  const auto y0 = static_cast<std::size_t>(std::floor(s.param("pos_y", 0.5) * static_cast<double>(height(in) - ch)));
  const auto x0 = static_cast<std::size_t>(std::floor(s.param("pos_x", 0.5) * static_cast<double>(width(in) - cw)));
  return resize_bilinear(crop(in, y0, x0, ch, cw), height(in), width(in));
}

inline Image elastic(const Image& in, double magnitude, std::uint64_t seed) {
  constexpr std::size_t grid = 8;
  Rng rng(seed);
  Image field({grid, grid, 2});
  for (auto& v : field.data) v = rng.uniform(-1.0, 1.0) * magnitude;
  Image disp = resize_bilinear(field, height(in), width(in));
  const double H = static_cast<double>(height(in)), W = static_cast<double>(width(in));
  Image out(in.shape);
  for (std::size_t y = 0; y < height(in); ++y)
    for (std::size_t x = 0; x < width(in); ++x) {
      const double sy = static_cast<double>(y) + at(disp, y, x, 0) * H;
      const double sx = static_cast<double>(x) + at(disp, y, x, 1) * W;
      for (std::size_t c = 0; c < channels(in); ++c) at(out, y, x, c) = sample_bilinear(in, sy, sx, c);
    }
  return out;
}

}  // namespace detail

/// Applies a soft transform; rejects hard kinds and out-of-range parameters.
inline Image apply_soft(const Image& x, const TransformSpec& spec) {
  check_image(x, "apply_soft");
  if (!is_soft(spec.kind))
    throw std::invalid_argument("apply_soft: " + std::string(kind_name(spec.kind)) + " is not a soft kind");
  switch (spec.kind) {
    case Kind::ColorJitter: {
      const double b = spec.param("brightness", 1.0), c = spec.param("contrast", 1.0),
                   s = spec.param("saturation", 1.0);
      detail::require_range(spec, "brightness", b, 0.8, 1.2);
      detail::require_range(spec, "contrast", c, 0.8, 1.2);
      detail::require_range(spec, "saturation", s, 0.8, 1.2);
      return detail::color_jitter(x, b, c, s);
    }
    case Kind::ColorTint: {
      const double k = spec.param("strength", 0.05);
      detail::require_range(spec, "strength", k, 0.0, 0.1);
      const std::array<double, 3> tint = {spec.param("r", 1.0), spec.param("g", 1.0), spec.param("b", 1.0)};
      for (double t : tint) detail::require_range(spec, "tint", t, 0.0, 1.0);
      Image out = x;
      for (std::size_t y = 0; y < height(x); ++y)
        for (std::size_t i = 0; i < width(x); ++i)
          for (std::size_t c = 0; c < channels(x); ++c)
            at(out, y, i, c) = clip01((1.0 - k) * at(x, y, i, c) + k * tint[std::min<std::size_t>(c, 2)]);
      return out;
    }
    case Kind::Grayscale: {
      Image out = x;
      for (std::size_t y = 0; y < height(x); ++y)
        for (std::size_t i = 0; i < width(x); ++i) {
          const double g = detail::luma(x, y, i);
          for (std::size_t c = 0; c < channels(x); ++c) at(out, y, i, c) = g;
        }
      return out;
    }
    case Kind::GaussianNoiseLight: {
      const double sigma = spec.param("sigma", 0.01);
      detail::require_range(spec, "sigma", sigma, 0.0, 0.02);
      if (sigma == 0.0) return x;
      Rng rng(spec.seed);
      Image out = x;
      for (auto& v : out.data) v = clip01(v + sigma * std::clamp(rng.normal(), -3.0, 3.0));
      return out;
    }
    default: break;
  }
  throw std::logic_error("apply_soft: unreachable");
}

/// Applies a hard transform; output keeps the input extent.
inline Image apply_hard(const Image& x, const TransformSpec& spec) {
  check_image(x, "apply_hard");
  if (is_soft(spec.kind))
    throw std::invalid_argument("apply_hard: " + std::string(kind_name(spec.kind)) + " is not a hard kind");
  Image out;
  switch (spec.kind) {
    case Kind::LargeRotation: out = detail::rotate(x, spec.param("degrees", 90.0)); break;
    case Kind::ExtremeCrop: out = detail::extreme_crop(x, spec); break;
    case Kind::Elastic: out = detail::elastic(x, spec.param("magnitude", 0.1), spec.seed); break;
    case Kind::HeavyNoise: {
      const double sigma = spec.param("sigma", 0.3);
      if (sigma < 0.0) throw std::invalid_argument("HeavyNoise: negative sigma");
      Rng rng(spec.seed);
      out = x;
      for (auto& v : out.data) v += sigma * rng.normal();
      break;
    }
    case Kind::CutoutFill: {
      Rng rng(spec.seed);
      out = x;
      std::vector<double> colour(channels(x));
      for (auto& c : colour) c = rng.uniform();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = colour[i % channels(x)];
      break;
    }
    default: throw std::logic_error("apply_hard: unreachable");
  }
  clip01(out);
  return out;
}

inline Image apply(const Image& x, const TransformSpec& spec) {
  return is_soft(spec.kind) ? apply_soft(x, spec) : apply_hard(x, spec);
}

/// Draws one spec of the given kind with parameters from the documented ranges.
inline TransformSpec sample_spec(Rng& rng, Kind kind) {
  TransformSpec s;
  s.kind = kind;
  switch (kind) {
    case Kind::ColorJitter:
      s.params = {{"brightness", rng.uniform(0.8, 1.2)},
                  {"contrast", rng.uniform(0.8, 1.2)},
                  {"saturation", rng.uniform(0.8, 1.2)}};
      break;
    case Kind::ColorTint:
      s.params = {{"strength", rng.uniform(0.0, 0.1)}, {"r", rng.uniform()}, {"g", rng.uniform()}, {"b", rng.uniform()}};
      break;
    case Kind::Grayscale: break;
    case Kind::GaussianNoiseLight: s.params = {{"sigma", rng.uniform(0.0, 0.02)}}; break;
    case Kind::LargeRotation: {
      const double mag = rng.uniform(60.0, 180.0);
      s.params = {{"degrees", rng.uniform() < 0.5 ? -mag : mag}};
      break;
    }
    case Kind::ExtremeCrop:
      s.params = {{"area", rng.uniform(0.1, 0.4)},
                  {"aspect", rng.uniform(0.75, 1.33)},
                  {"pos_y", rng.uniform()},
                  {"pos_x", rng.uniform()}};
      break;
    case Kind::Elastic: s.params = {{"magnitude", rng.uniform(0.05, 0.15)}}; break;
    case Kind::HeavyNoise: s.params = {{"sigma", rng.uniform(0.2, 0.5)}}; break;
    case Kind::CutoutFill: break;
  }
  s.seed = rng.next_u64();
  return s;
}

/// k specs with kinds drawn uniformly from the pool.
inline std::vector<TransformSpec> sample_transforms(Rng& rng, std::size_t k, Pool pool) {
  std::vector<TransformSpec> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const Kind kind = pool == Pool::Soft
                          ? kSoftKinds[static_cast<std::size_t>(rng.uniform_int(0, kSoftKinds.size() - 1))]
                          : kHardKinds[static_cast<std::size_t>(rng.uniform_int(0, kHardKinds.size() - 1))];
    out.push_back(sample_spec(rng, kind));
  }
  return out;
}

}  // namespace patchguard::augment
