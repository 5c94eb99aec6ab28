#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchguard/image.hpp"
#include "patchguard/io.hpp"
#include "patchguard/rng.hpp"

namespace patchguard::datasets {

namespace fs = std::filesystem;

struct TestSample {
  std::string name;  // "<category>/<stem>", unique within the split
  Image image;
  Mask mask;      // all zero for normal samples
  int label = 0;  // 1 = anomalous
};

struct DatasetSplit {
  std::vector<std::string> train_names;
  std::vector<Image> train;  // normal images only
  std::vector<TestSample> test;
  std::vector<std::string> warnings;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Folder layout: root/train/good/*.png, root/test/<category>/*.png,
// root/ground_truth/<category>/<stem>_mask.png for every category but "good".

inline std::vector<fs::path> sorted_pngs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline Image fit(Image im, std::optional<std::size_t> size) {
  if (size && (height(im) != *size || width(im) != *size)) return resize_bilinear(im, *size, *size);
  return im;
}

inline Mask fit_mask(Mask m, std::optional<std::size_t> size) {
  if (size && (m.shape[0] != *size || m.shape[1] != *size)) return resize_nearest(m, *size, *size);
  return m;
}

/// Loads an MVTec-style folder. With `image_size`, images are resized
/// bilinearly and masks by nearest neighbour.
inline DatasetSplit load_folder(const fs::path& root, std::optional<std::size_t> image_size = {}) {
  if (!fs::is_directory(root)) throw DatasetError("dataset folder '" + root.string() + "' does not exist");
  DatasetSplit split;
  for (const auto& p : sorted_pngs(root / "train" / "good")) {
    split.train_names.push_back(p.filename().string());
    split.train.push_back(fit(io::read_png(p), image_size));
  }
  if (split.train.empty()) throw DatasetError("no training images under '" + (root / "train" / "good").string() + "'");

  std::vector<fs::path> categories;
  if (fs::is_directory(root / "test"))
    for (const auto& e : fs::directory_iterator(root / "test"))
      if (e.is_directory()) categories.push_back(e.path());
  std::sort(categories.begin(), categories.end());
  bool any_good = false;
  for (const auto& dir : categories) {
    const std::string cat = dir.filename().string();
    const bool good = cat == "good";
    for (const auto& p : sorted_pngs(dir)) {
      TestSample s;
      s.name = cat + "/" + p.stem().string();
      s.image = fit(io::read_png(p), image_size);
      if (good) {
        any_good = true;
        s.mask = zeros_mask(height(s.image), width(s.image));
      } else {
        const fs::path mp = root / "ground_truth" / cat / (p.stem().string() + "_mask.png");
        if (!fs::exists(mp)) throw DatasetError("missing mask for anomalous test image: " + mp.string());
        s.mask = fit_mask(io::read_mask(mp), image_size);
        if (s.mask.shape != nd::Shape{height(s.image), width(s.image)})
          throw DatasetError("mask size does not match image: " + mp.string());
        s.label = 1;
      }
      split.test.push_back(std::move(s));
    }
  }
  if (!any_good) split.warnings.push_back("no normal test images under '" + (root / "test" / "good").string() + "'");
  return split;
}

/// Writes a split in the folder layout read by load_folder.
inline void save_folder(const DatasetSplit& split, const fs::path& root, const nlohmann::json& manifest = {}) {
  fs::create_directories(root / "train" / "good");
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    const std::string name = i < split.train_names.size() ? split.train_names[i] : std::to_string(i) + ".png";
    io::write_png(root / "train" / "good" / name, split.train[i]);
  }
  nlohmann::json tests = nlohmann::json::array();
  for (const auto& s : split.test) {
    const auto slash = s.name.find('/');
    if (slash == std::string::npos) throw DatasetError("test sample name must be <category>/<stem>: " + s.name);
    const std::string cat = s.name.substr(0, slash), stem = s.name.substr(slash + 1);
    if ((cat == "good") != (s.label == 0)) throw DatasetError("test sample '" + s.name + "' label does not match its category");
    io::write_png(root / "test" / cat / (stem + ".png"), s.image);
    if (s.label) io::write_mask(root / "ground_truth" / cat / (stem + "_mask.png"), s.mask);
    tests.push_back({{"name", s.name}, {"label", s.label}, {"mask_pixels", mask_count(s.mask)}});
  }
  nlohmann::json m = manifest.is_null() ? nlohmann::json::object() : manifest;
  m["train"] = split.train_names;
  m["test"] = tests;
  std::ofstream(root / "manifest.json") << m.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Procedural textures with planted defects.

enum class Texture { Stripes, Checker, ValueNoise };
enum class Defect { Scratch, Blob, PatchSwap };

inline std::string texture_name(Texture t) {
  switch (t) {
    case Texture::Stripes: return "stripes";
    case Texture::Checker: return "checker";
    case Texture::ValueNoise: return "value-noise";
  }
  return "?";
}

inline Texture texture_from_name(const std::string& s) {
  for (auto t : {Texture::Stripes, Texture::Checker, Texture::ValueNoise})
    if (texture_name(t) == s) return t;
  throw std::invalid_argument("unknown texture '" + s + "' (stripes, checker, value-noise)");
}

inline std::string defect_name(Defect d) {
  switch (d) {
    case Defect::Scratch: return "scratch";
    case Defect::Blob: return "blob";
    case Defect::PatchSwap: return "patch-swap";
  }
  return "?";
}

inline Defect defect_from_name(const std::string& s) {
  for (auto d : {Defect::Scratch, Defect::Blob, Defect::PatchSwap})
    if (defect_name(d) == s) return d;
  throw std::invalid_argument("unknown defect '" + s + "' (scratch, blob, patch-swap)");
}

struct SynthSpec {
  Texture texture = Texture::ValueNoise;
  std::size_t image_size = 64;
  std::size_t n_train = 200;
  std::size_t n_test = 100;
  std::vector<Defect> defects = {Defect::Scratch, Defect::Blob, Defect::PatchSwap};
  double anomalous_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 16) throw std::invalid_argument("synthetic image size must be at least 16");
    if (n_train == 0) throw std::invalid_argument("synthetic dataset needs at least one training image");
    if (defects.empty() && anomalous_fraction > 0.0) throw std::invalid_argument("no defect kinds given");
    if (!(anomalous_fraction >= 0.0 && anomalous_fraction <= 1.0)) throw std::invalid_argument("anomalous fraction must be in [0, 1]");
  }
};

inline constexpr double kMinDefectArea = 0.002, kMaxDefectArea = 0.09;

inline nlohmann::json to_json(const SynthSpec& s) {
  std::vector<std::string> d;
  for (auto k : s.defects) d.push_back(defect_name(k));
  return {{"texture", texture_name(s.texture)}, {"image_size", s.image_size}, {"n_train", s.n_train},
          {"n_test", s.n_test}, {"defects", d}, {"anomalous_fraction", s.anomalous_fraction}, {"seed", s.seed}};
}

/// Values on the 8-bit grid so PNG storage is lossless.
inline void quantize(Image& im) {
  for (auto& v : im.data) v = std::round(clip01(v) * 255.0) / 255.0;
}

/// Dataset-wide look shared by all samples; individual images vary phase,
/// offset and noise lattice.
struct Style {
  double base[3], accent[3];
  double period, angle, cell;
};

inline Style sample_style(Texture t, Rng& rng) {
  Style s{};
  for (int c = 0; c < 3; ++c) {
    s.base[c] = rng.uniform(0.25, 0.45);
    s.accent[c] = rng.uniform(0.55, 0.75);
  }
  s.period = rng.uniform(6.0, 10.0);
  s.angle = rng.uniform(0.0, std::numbers::pi);
  s.cell = t == Texture::Checker ? static_cast<double>(rng.uniform_int(6, 10)) : 8.0;
  return s;
}

/// Smooth lattice noise in [0, 1] with the given lattice spacing (pixels).
inline std::vector<double> value_noise(std::size_t n, double spacing, Rng& rng) {
  const auto g = static_cast<std::size_t>(std::ceil(static_cast<double>(n) / spacing)) + 2;
  std::vector<double> lattice(g * g);
  for (auto& v : lattice) v = rng.uniform();
  const double oy = rng.uniform(0.0, 1.0), ox = rng.uniform(0.0, 1.0);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  std::vector<double> out(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double fy = static_cast<double>(y) / spacing + oy, fx = static_cast<double>(x) / spacing + ox;
      const auto iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
      const double ty = smooth(fy - static_cast<double>(iy)), tx = smooth(fx - static_cast<double>(ix));
      const double a = lattice[iy * g + ix], b = lattice[iy * g + ix + 1];
      const double c = lattice[(iy + 1) * g + ix], d = lattice[(iy + 1) * g + ix + 1];
      out[y * n + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  return out;
}

inline Image render_texture(Texture t, const Style& st, std::size_t n, Rng& rng, double scale = 1.0) {
  Image im({n, n, 3});
  std::vector<double> mix(n * n);
  switch (t) {
    case Texture::Stripes: {
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double ang = st.angle + rng.uniform(-0.1, 0.1);
      const double freq = 2.0 * std::numbers::pi / (st.period * scale);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double u = static_cast<double>(x) * std::cos(ang) + static_cast<double>(y) * std::sin(ang);
          mix[y * n + x] = 0.5 + 0.5 * std::sin(freq * u + phase);
        }
      break;
    }
    case Texture::Checker: {
      const double cell = st.cell * scale;
      const double oy = rng.uniform(0.0, 2 * cell), ox = rng.uniform(0.0, 2 * cell);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const auto cy = static_cast<long>(std::floor((static_cast<double>(y) + oy) / cell));
          const auto cx = static_cast<long>(std::floor((static_cast<double>(x) + ox) / cell));
          mix[y * n + x] = ((cy + cx) % 2 == 0) ? 0.0 : 1.0;
        }
      break;
    }
    case Texture::ValueNoise: {
      auto coarse = value_noise(n, 8.0 * scale, rng);
      auto fine = value_noise(n, 4.0 * scale, rng);
      for (std::size_t i = 0; i < n * n; ++i) mix[i] = 0.7 * coarse[i] + 0.3 * fine[i];
      break;
    }
  }
  for (std::size_t i = 0; i < n * n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      im.data[i * 3 + c] = st.base[c] + (st.accent[c] - st.base[c]) * mix[i] + rng.normal(0.0, 0.01);
  quantize(im);
  return im;
}

/// Plants one defect; returns false if its area falls outside the bounds, in
/// which case `im` is left untouched.
inline bool plant_defect(Image& im, Mask& mask, Defect kind, Texture t, const Style& st, Rng& rng) {
  const std::size_t n = height(im);
  const double N = static_cast<double>(n);
  Mask m = zeros_mask(n, n);
  Image out = im;
  switch (kind) {
    case Defect::Scratch: {
      const double len = rng.uniform(0.25, 0.6) * N, ang = rng.uniform(0.0, std::numbers::pi);
      const double half_w = rng.uniform(0.6, 1.4);
      const double cy = rng.uniform(0.2, 0.8) * N, cx = rng.uniform(0.2, 0.8) * N;
      const double tone = rng.uniform() < 0.5 ? rng.uniform(0.0, 0.1) : rng.uniform(0.9, 1.0);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double along = dx * std::cos(ang) + dy * std::sin(ang);
          const double across = -dx * std::sin(ang) + dy * std::cos(ang);
          if (std::abs(along) <= len / 2 && std::abs(across) <= half_w) {
            m.data[y * n + x] = 1.0;
            for (std::size_t c = 0; c < 3; ++c) at(out, y, x, c) = tone;
          }
        }
      break;
    }
    case Defect::Blob: {
      const double ry = rng.uniform(0.05, 0.15) * N, rx = rng.uniform(0.05, 0.15) * N;
      const double cy = rng.uniform(0.15, 0.85) * N, cx = rng.uniform(0.15, 0.85) * N;
      const double shift = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.3, 0.45);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double dy = (static_cast<double>(y) - cy) / ry, dx = (static_cast<double>(x) - cx) / rx;
          if (dy * dy + dx * dx <= 1.0) {
            m.data[y * n + x] = 1.0;
            for (std::size_t c = 0; c < 3; ++c) at(out, y, x, c) += shift;
          }
        }
      break;
    }
    case Defect::PatchSwap: {
      // rectangle filled from the same style rendered at a different scale
      const auto h = static_cast<std::size_t>(rng.uniform(0.1, 0.28) * N);
      const auto w = static_cast<std::size_t>(rng.uniform(0.1, 0.28) * N);
      const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - h)));
      const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - w)));
      Image src = render_texture(t, st, n, rng, rng.uniform() < 0.5 ? 0.4 : 2.5);
      for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x) {
          m.data[y * n + x] = 1.0;
          for (std::size_t c = 0; c < 3; ++c) at(out, y, x, c) = at(src, y, x, c);
        }
      break;
    }
  }
  const double area = static_cast<double>(mask_count(m)) / (N * N);
  if (area < kMinDefectArea || area > kMaxDefectArea) return false;
  quantize(out);
  im = std::move(out);
  mask = std::move(m);
  return true;
}

/// Deterministic synthetic split; test samples are ordered by name, as
/// load_folder would return them.
inline DatasetSplit make_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Style st = sample_style(spec.texture, rng);
  DatasetSplit split;
  char buf[32];
  for (std::size_t i = 0; i < spec.n_train; ++i) {
    std::snprintf(buf, sizeof buf, "%03zu.png", i);
    split.train_names.push_back(buf);
    split.train.push_back(render_texture(spec.texture, st, spec.image_size, rng));
  }
  const auto n_anom = static_cast<std::size_t>(std::lround(spec.anomalous_fraction * static_cast<double>(spec.n_test)));
  for (std::size_t i = 0; i < spec.n_test; ++i) {
    TestSample s;
    s.image = render_texture(spec.texture, st, spec.image_size, rng);
    s.mask = zeros_mask(spec.image_size, spec.image_size);
    std::string cat = "good";
    if (i < n_anom) {
      const Defect d = spec.defects[i % spec.defects.size()];
      while (!plant_defect(s.image, s.mask, d, spec.texture, st, rng)) {
      }
      s.label = 1;
      cat = defect_name(d);
    }
    std::snprintf(buf, sizeof buf, "%03zu", i);
    s.name = cat + "/" + buf;
    split.test.push_back(std::move(s));
  }
  std::stable_sort(split.test.begin(), split.test.end(), [](const TestSample& a, const TestSample& b) { return a.name < b.name; });
  if (n_anom == spec.n_test) split.warnings.push_back("no normal test images");
  return split;
}

/// Reference detector: mean over channels of |x - mean training image|.
inline std::vector<Mask> mean_diff_maps(const DatasetSplit& split) {
  const Image& ref = split.train.at(0);
  Image mean(ref.shape, 0.0);
  for (const auto& im : split.train)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += im[i] / static_cast<double>(split.train.size());
  std::vector<Mask> out;
  const std::size_t C = channels(ref);
  for (const auto& s : split.test) {
    Mask m({height(ref), width(ref)}, 0.0);
    for (std::size_t p = 0; p < m.size(); ++p) {
      for (std::size_t c = 0; c < C; ++c) m[p] += std::abs(s.image[p * C + c] - mean[p * C + c]);
      m[p] /= static_cast<double>(C);
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace patchguard::datasets
