#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "patchguard/augment.hpp"
#include "patchguard/image.hpp"
#include "patchguard/io.hpp"
#include "patchguard/rng.hpp"
#include "patchguard/saliency.hpp"

namespace patchguard::pseudogen {

struct Anchor {
  std::size_t row = 0, col = 0;
  bool operator==(const Anchor&) const = default;
};

struct AnchorDraw {
  Anchor anchor;
  bool fallback = false;  // saliency was all zero; drawn from the full image
};

/// Pixels eligible for anchors: value >= the 80th percentile (nearest rank)
/// of the positive values. Empty if the map has no positive value.
inline std::vector<std::size_t> anchor_region(const saliency::SaliencyMap& g) {
  std::vector<double> pos;
  for (double v : g.data)
    if (v > 0.0) pos.push_back(v);
  if (pos.empty()) return {};
  std::sort(pos.begin(), pos.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.8 * static_cast<double>(pos.size())));
  const double thr = pos[std::max<std::size_t>(rank, 1) - 1];
  std::vector<std::size_t> region;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.data[i] >= thr) region.push_back(i);
  return region;
}

inline AnchorDraw sample_anchor(const saliency::SaliencyMap& g, Rng& rng) {
  if (g.rank() != 2 || g.size() == 0) throw nd::ShapeError("sample_anchor: expected non-empty HxW map, got " + nd::to_string(g.shape));
  const std::size_t W = g.shape[1];
  auto region = anchor_region(g);
  AnchorDraw d;
  std::size_t idx;
  if (region.empty()) {
    d.fallback = true;
    idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(g.size()) - 1));
  } else {
    idx = region[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(region.size()) - 1))];
  }
  d.anchor = {idx / W, idx % W};
  return d;
}

/// Rectangle of size width x height (pixels) centred on the anchor pixel's
/// centre, rotated by theta degrees.
struct MaskGeometry {
  Anchor center;
  double width = 0.0, height = 0.0, theta = 0.0;
};

/// True iff the centre of pixel (r, c) lies inside the rotated rectangle.
inline bool covers(const MaskGeometry& g, std::size_t r, std::size_t c) {
  const double dy = static_cast<double>(r) - static_cast<double>(g.center.row);
  const double dx = static_cast<double>(c) - static_cast<double>(g.center.col);
  const double t = g.theta * std::numbers::pi / 180.0;
  const double u = dx * std::cos(t) + dy * std::sin(t);
  const double v = -dx * std::sin(t) + dy * std::cos(t);
  constexpr double eps = 1e-9;
  return std::abs(u) <= g.width / 2.0 + eps && std::abs(v) <= g.height / 2.0 + eps;
}

inline Mask rasterize(const MaskGeometry& g, std::size_t H, std::size_t W) {
  Mask m({H, W}, 0.0);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      if (covers(g, r, c)) m.data[r * W + c] = 1.0;
  return m;
}

inline MaskGeometry sample_geometry(Anchor a, std::size_t H, std::size_t W, Rng& rng) {
  MaskGeometry g;
  g.center = a;
  g.width = rng.uniform(0.05, 0.3) * static_cast<double>(W);
  g.height = rng.uniform(0.05, 0.3) * static_cast<double>(H);
  g.theta = rng.uniform(-45.0, 45.0);
  return g;
}

struct MaskDraw {
  MaskGeometry geometry;
  Mask mask;
};

inline MaskDraw make_mask(Anchor a, std::size_t H, std::size_t W, Rng& rng) {
  if (a.row >= H || a.col >= W) throw std::invalid_argument("make_mask: anchor outside image");
  for (int attempt = 0; attempt <= 8; ++attempt) {
    MaskDraw d{sample_geometry(a, H, W, rng), {}};
    d.mask = rasterize(d.geometry, H, W);
    if (mask_count(d.mask) > 0) return d;
  }
  throw std::runtime_error("make_mask: empty mask after 8 retries");
}

struct Box {
  std::size_t y0, x0, h, w;
};

inline Box bounding_box(const Mask& m) {
  const std::size_t H = m.shape[0], W = m.shape[1];
  std::size_t y0 = H, x0 = W, y1 = 0, x1 = 0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      if (m.data[r * W + c] > 0.5) {
        y0 = std::min(y0, r);
        x0 = std::min(x0, c);
        y1 = std::max(y1, r);
        x1 = std::max(x1, c);
      }
  if (y0 == H) throw std::invalid_argument("bounding_box: empty mask");
  return {y0, x0, y1 - y0 + 1, x1 - x0 + 1};
}

/// Applies the hard chain (last spec innermost) to the mask's bounding box and
/// pastes the result back inside the mask only; pixels outside the mask are
/// copied from x unchanged.
inline Image synthesize_anomaly(const Image& x, const Mask& mask, const std::vector<augment::TransformSpec>& hard_specs) {
  check_image(x, "synthesize_anomaly");
  if (hard_specs.empty()) throw std::invalid_argument("synthesize_anomaly: at least one hard transform required");
  if (mask.shape != nd::Shape{height(x), width(x)}) throw nd::shape_error("synthesize_anomaly", x.shape, mask.shape);
  for (const auto& s : hard_specs)
    if (augment::is_soft(s.kind)) throw std::invalid_argument("synthesize_anomaly: soft transform in hard chain");
  const Box b = bounding_box(mask);
  Image patch = crop(x, b.y0, b.x0, b.h, b.w);
  for (auto it = hard_specs.rbegin(); it != hard_specs.rend(); ++it) patch = augment::apply_hard(patch, *it);
  Image out = x;
  const std::size_t W = width(x), C = channels(x);
  for (std::size_t r = 0; r < b.h; ++r)
    for (std::size_t c = 0; c < b.w; ++c)
      if (mask.data[(b.y0 + r) * W + b.x0 + c] > 0.5)
        for (std::size_t k = 0; k < C; ++k) at(out, b.y0 + r, b.x0 + c, k) = at(patch, r, c, k);
  return out;
}

inline double mean_abs_diff_inside(const Image& a, const Image& b, const Mask& m) {
  const std::size_t C = channels(a);
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < m.size(); ++p)
    if (m.data[p] > 0.5) {
      for (std::size_t k = 0; k < C; ++k) s += std::abs(a.data[p * C + k] - b.data[p * C + k]);
      n += C;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

struct GenOptions {
  std::size_t k_hard_min = 1, k_hard_max = 3;
  double min_mean_change = 1e-3;  // weaker realizations are resampled
  std::size_t max_attempts = 32;
};

struct PseudoSample {
  Image image;
  Mask mask;
  nlohmann::json manifest;
};

/// Saliency -> anchor -> mask -> hard-transform synthesis, seeded.
inline PseudoSample generate_pair(const Image& x, const saliency::SaliencyProvider& provider, std::uint64_t seed,
                                  const GenOptions& opt = {}) {
  check_image(x, "generate_pair");
  if (opt.k_hard_min < 1 || opt.k_hard_max < opt.k_hard_min) throw std::invalid_argument("generate_pair: bad k_hard range");
  Rng rng(seed);
  Rng sal_rng = rng.fork();
  const auto sal = provider.saliency(x, sal_rng);
  nlohmann::json soft = nlohmann::json::array();
  for (const auto& s : sal.soft_specs) soft.push_back(augment::to_json(s));

  for (std::size_t attempt = 1; attempt <= opt.max_attempts; ++attempt) {
    const auto a = sample_anchor(sal.map, rng);
    auto md = make_mask(a.anchor, height(x), width(x), rng);
    const auto k = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(opt.k_hard_min), static_cast<std::int64_t>(opt.k_hard_max)));
    const auto hard = augment::sample_transforms(rng, k, augment::Pool::Hard);
    Image out;
    try {
      out = synthesize_anomaly(x, md.mask, hard);
    } catch (const std::invalid_argument&) {
      continue;  // degenerate crop on a tiny box
    }
    if (mean_abs_diff_inside(out, x, md.mask) < opt.min_mean_change) continue;

    nlohmann::json hard_j = nlohmann::json::array();
    for (const auto& s : hard) hard_j.push_back(augment::to_json(s));
    const auto& g = md.geometry;
    PseudoSample ps{std::move(out), std::move(md.mask), {}};
    ps.manifest = {{"seed", seed},
                   {"attempts", attempt},
                   {"soft_specs", soft},
                   {"saliency_all_zero", sal.all_zero},
                   {"anchor", {{"row", a.anchor.row}, {"col", a.anchor.col}, {"fallback", a.fallback}}},
                   {"geometry", {{"width", g.width}, {"height", g.height}, {"theta", g.theta}}},
                   {"hard_specs", hard_j},
                   {"mask_pixels", mask_count(ps.mask)}};
    return ps;
  }
  throw std::runtime_error("generate_pair: no usable anomaly after " + std::to_string(opt.max_attempts) + " attempts");
}

/// Generates one pseudo-anomaly per source image and writes
/// images/NNN.png, masks/NNN.png and manifest.jsonl under out_dir.
inline void write_corpus(const std::filesystem::path& out_dir, const std::vector<Image>& sources,
                         const std::vector<std::string>& source_names, const saliency::SaliencyProvider& provider,
                         std::uint64_t seed, const GenOptions& opt = {}) {
  if (sources.size() != source_names.size()) throw std::invalid_argument("write_corpus: names/images size mismatch");
  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "masks");
  std::ofstream manifest(out_dir / "manifest.jsonl");
  if (!manifest) throw io::IoError("cannot write " + (out_dir / "manifest.jsonl").string());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%03zu", i);
    auto ps = generate_pair(sources[i], provider, Rng::splitmix(seed + i), opt);
    io::write_png(out_dir / "images" / (std::string(stem) + ".png"), ps.image);
    io::write_mask(out_dir / "masks" / (std::string(stem) + ".png"), ps.mask);
    ps.manifest["index"] = i;
    ps.manifest["source"] = source_names[i];
    manifest << ps.manifest.dump() << '\n';
  }
}

}  // namespace patchguard::pseudogen
