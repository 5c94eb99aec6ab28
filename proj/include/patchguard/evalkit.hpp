#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchguard/attacks.hpp"
#include "patchguard/datasets.hpp"
#include "patchguard/io.hpp"
#include "patchguard/vit.hpp"

namespace patchguard::evalkit {

using nd::Array;

/// Average (1-based) ranks with ties sharing the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Mann-Whitney AUROC in [0, 1]: P(anomalous > normal) + P(tie) / 2.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("auroc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("auroc: both classes must be present");
  for (double s : scores)
    if (std::isnan(s)) throw std::invalid_argument("auroc: NaN score");
  const auto r = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    if (labels[i]) rank_sum += r[i];
  const double P = static_cast<double>(pos), N = static_cast<double>(neg);
  return (rank_sum - P * (P + 1.0) / 2.0) / (P * N);
}

/// Spearman rank correlation; 0 when either side is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length series of size >= 2");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

// ---------------------------------------------------------------------------

struct ImageRecord {
  std::string name;
  int label = 0;
  double score_clean = 0.0;
  std::optional<double> score_adv;
};

/// AUROC values are percentages.
struct EvalReport {
  double image_auroc_clean = 0.0, pixel_auroc_clean = 0.0;
  std::optional<double> image_auroc_adv, pixel_auroc_adv;
  std::optional<attacks::AttackSpec> attack;
  std::vector<ImageRecord> images;
  double runtime_seconds = 0.0;
  std::size_t aborted_batches = 0;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"image_auroc_clean", r.image_auroc_clean},
                      {"pixel_auroc_clean", r.pixel_auroc_clean},
                      {"runtime_seconds", r.runtime_seconds}};
  if (r.image_auroc_adv) j["image_auroc_adv"] = *r.image_auroc_adv;
  if (r.pixel_auroc_adv) j["pixel_auroc_adv"] = *r.pixel_auroc_adv;
  if (r.attack) {
    j["attack"] = attacks::to_json(*r.attack);
    j["aborted_batches"] = r.aborted_batches;
  }
  nlohmann::json imgs = nlohmann::json::array();
  for (const auto& im : r.images) {
    nlohmann::json e = {{"name", im.name}, {"label", im.label}, {"score_clean", im.score_clean}};
    if (im.score_adv) e["score_adv"] = *im.score_adv;
    imgs.push_back(e);
  }
  j["images"] = imgs;
  return j;
}

inline std::string cell(double clean, const std::optional<double>& adv) {
  char buf[64];
  if (adv)
    std::snprintf(buf, sizeof buf, "%.1f / %.1f", clean, *adv);
  else
    std::snprintf(buf, sizeof buf, "%.1f", clean);
  return buf;
}

/// Markdown table with "Clean / Adversarial" cells.
inline std::string render_table(const EvalReport& r) {
  std::ostringstream os;
  const bool adv = r.image_auroc_adv || r.pixel_auroc_adv;
  os << "| Metric | " << (adv ? "Clean / Adversarial" : "Clean") << " |\n|---|---|\n";
  os << "| Image AUROC % | " << cell(r.image_auroc_clean, r.image_auroc_adv) << " |\n";
  os << "| Pixel AUROC % | " << cell(r.pixel_auroc_clean, r.pixel_auroc_adv) << " |\n";
  return os.str();
}

struct EvalOptions {
  std::size_t batch = 16;
  bool adv_image = true;  // run the detection attack when an attack is given
  bool adv_pixel = true;  // run the localization attack when an attack is given
};

struct Outputs {
  std::vector<double> image_scores;
  std::vector<Array> maps;  // H x W per image
};

inline std::vector<std::vector<std::size_t>> batches_of(std::size_t n, std::size_t b) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += b) {
    out.emplace_back();
    for (std::size_t j = i; j < std::min(n, i + b); ++j) out.back().push_back(j);
  }
  return out;
}

/// Clean or attacked model outputs for the given test samples. `attack`
/// picks the objective; nullopt runs the clean pass.
inline Outputs model_outputs(const vit::ViTDetector& model, const std::vector<datasets::TestSample>& test,
                             std::optional<attacks::AttackSpec> attack, std::size_t batch, std::size_t* aborted = nullptr) {
  Outputs out;
  const auto& cfg = model.config();
  std::size_t bi = 0;
  for (const auto& idx : batches_of(test.size(), std::max<std::size_t>(batch, 1))) {
    std::vector<Image> ims;
    std::vector<Mask> masks;
    for (auto i : idx) {
      ims.push_back(test[i].image);
      masks.push_back(test[i].mask);
    }
    Array x = vit::stack(ims);
    if (attack) {
      auto spec = *attack;
      spec.seed = Rng::splitmix(attack->seed + bi);
      auto r = attacks::run(model, x, masks, spec);
      if (r.aborted && aborted) ++*aborted;
      x = std::move(r.x);
    }
    ++bi;
    nd::FrozenParams frozen(model.parameters());
    const Array scores = model.forward(nd::constant(std::move(x))).scores.value();
    const std::size_t P = cfg.tokens();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      Array row({P}, std::vector<double>(scores.data.begin() + static_cast<long>(b * P),
                                         scores.data.begin() + static_cast<long>((b + 1) * P)));
      out.image_scores.push_back(vit::image_score(row, cfg.topk));
      out.maps.push_back(vit::upsample_map(row, cfg.image_size));
    }
  }
  return out;
}

inline double pixel_auroc(const std::vector<Array>& maps, const std::vector<datasets::TestSample>& test,
                          const std::vector<std::size_t>& members) {
  std::vector<double> s;
  std::vector<int> l;
  for (auto i : members) {
    const auto& m = maps[i];
    if (m.size() != test[i].mask.size()) throw nd::shape_error("pixel_auroc", m.shape, test[i].mask.shape);
    for (std::size_t p = 0; p < m.size(); ++p) {
      s.push_back(m[p]);
      l.push_back(test[i].mask[p] > 0.5 ? 1 : 0);
    }
  }
  return auroc(s, l);
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

/// Report from precomputed outputs; adversarial parts are optional.
inline EvalReport assemble(const std::vector<datasets::TestSample>& test, const Outputs& clean,
                           const Outputs* adv_detect = nullptr, const Outputs* adv_localize = nullptr) {
  EvalReport rep;
  std::vector<int> labels;
  for (const auto& s : test) labels.push_back(s.label);
  const auto all = all_indices(test.size());
  rep.image_auroc_clean = 100.0 * auroc(clean.image_scores, labels);
  rep.pixel_auroc_clean = 100.0 * pixel_auroc(clean.maps, test, all);
  for (std::size_t i = 0; i < test.size(); ++i) rep.images.push_back({test[i].name, labels[i], clean.image_scores[i], {}});
  if (adv_detect) {
    rep.image_auroc_adv = 100.0 * auroc(adv_detect->image_scores, labels);
    for (std::size_t i = 0; i < test.size(); ++i) rep.images[i].score_adv = adv_detect->image_scores[i];
  }
  if (adv_localize) rep.pixel_auroc_adv = 100.0 * pixel_auroc(adv_localize->maps, test, all);
  return rep;
}

/// Image AUROC (top-k score) and pixel AUROC (upsampled maps), clean and,
/// if an attack is given, under the detection and localization attacks.
inline EvalReport evaluate(const vit::ViTDetector& model, const std::vector<datasets::TestSample>& test,
                           std::optional<attacks::AttackSpec> attack = {}, const EvalOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto clean = model_outputs(model, test, std::nullopt, opt.batch);
  std::optional<Outputs> det, loc;
  std::size_t aborted = 0;
  if (attack && opt.adv_image) {
    auto spec = *attack;
    spec.objective = attacks::Objective::DetectScore;
    det = model_outputs(model, test, spec, opt.batch, &aborted);
  }
  if (attack && opt.adv_pixel) {
    auto spec = *attack;
    if (spec.objective != attacks::Objective::SegPGDPatchwise) spec.objective = attacks::Objective::LocalizeMap;
    loc = model_outputs(model, test, spec, opt.batch, &aborted);
  }
  EvalReport rep = assemble(test, clean, det ? &*det : nullptr, loc ? &*loc : nullptr);
  rep.attack = attack;
  rep.aborted_batches = aborted;
  rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Vulnerability against attention degree.

struct Cluster {
  std::size_t id = 0;
  std::vector<std::size_t> members;  // test indices
  double mean_attention_degree = 0.0;
  double auroc_clean = 0.0, auroc_adv = 0.0;  // pixel AUROC, percent
  double vulnerability = 0.0;
  bool merged = false;  // absorbed a neighbour that had a single pixel class
};

struct VulnerabilityProfile {
  std::vector<Cluster> clusters;
  std::vector<double> degrees;  // per test image
  bool uninformative = false;   // every image has the same attention degree
  std::vector<std::string> warnings;
};

inline bool has_both_pixel_classes(const std::vector<datasets::TestSample>& test, const std::vector<std::size_t>& m) {
  bool pos = false, neg = false;
  for (auto i : m)
    for (double v : test[i].mask.data) (v > 0.5 ? pos : neg) = true;
  return pos && neg;
}

/// Equal-frequency bins of the sorted values (ties broken by index); sizes
/// differ by at most one.
inline std::vector<std::vector<std::size_t>> quantile_bins(const std::vector<double>& v, std::size_t n) {
  std::vector<std::size_t> order = all_indices(v.size());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<std::vector<std::size_t>> bins(n);
  for (std::size_t k = 0; k < order.size(); ++k) bins[k * n / order.size()].push_back(order[k]);
  return bins;
}

/// Folds every bin whose pixels are all one class into its right neighbour
/// (left for the last bin). Returns per-bin merged flags.
inline std::vector<bool> merge_single_class_bins(std::vector<std::vector<std::size_t>>& bins,
                                                 const std::vector<datasets::TestSample>& test,
                                                 std::vector<std::string>& warnings) {
  std::vector<bool> merged(bins.size(), false);
  std::vector<std::size_t> original(bins.size());
  std::iota(original.begin(), original.end(), 0);
  for (std::size_t k = 0; k < bins.size() && bins.size() > 1;) {
    if (has_both_pixel_classes(test, bins[k])) {
      ++k;
      continue;
    }
    const std::size_t into = k + 1 < bins.size() ? k + 1 : k - 1;
    bins[into].insert(bins[into].end(), bins[k].begin(), bins[k].end());
    merged[into] = true;
    warnings.push_back("cluster " + std::to_string(original[k]) + " had a single pixel class and was merged");
    bins.erase(bins.begin() + static_cast<long>(k));
    merged.erase(merged.begin() + static_cast<long>(k));
    original.erase(original.begin() + static_cast<long>(k));
    if (into < k) --k;
  }
  if (!has_both_pixel_classes(test, bins[0])) throw std::invalid_argument("test set has a single pixel class");
  return merged;
}

/// Attention degree of every test image at the regularized layer.
inline std::vector<double> attention_degrees(const vit::ViTDetector& model, const std::vector<datasets::TestSample>& test,
                                             std::size_t batch) {
  std::vector<double> out;
  nd::FrozenParams frozen(model.parameters());
  for (const auto& idx : batches_of(test.size(), std::max<std::size_t>(batch, 1))) {
    std::vector<Image> ims;
    for (auto i : idx) ims.push_back(test[i].image);
    const auto f = model.forward(nd::constant(vit::stack(ims)));
    for (double d : vit::attention_degree_per_sample(model.reg_attention(f).value(), model.config().effective_delta()))
      out.push_back(d);
  }
  return out;
}

/// Clusters test images into equal-frequency bins of attention degree and
/// measures |clean - adversarial| pixel AUROC per bin, from precomputed maps.
inline VulnerabilityProfile profile_from_outputs(std::vector<double> degrees, const Outputs& clean, const Outputs& adv,
                                                 const std::vector<datasets::TestSample>& test, std::size_t n_clusters = 5) {
  if (n_clusters < 2) throw std::invalid_argument("vulnerability profile: need at least 2 clusters");
  if (test.size() < n_clusters) throw std::invalid_argument("vulnerability profile: fewer images than clusters");
  if (degrees.size() != test.size() || clean.maps.size() != test.size() || adv.maps.size() != test.size())
    throw std::invalid_argument("vulnerability profile: per-image inputs disagree in count");
  VulnerabilityProfile prof;
  prof.degrees = std::move(degrees);
  prof.uninformative = std::all_of(prof.degrees.begin(), prof.degrees.end(), [&](double d) { return d == prof.degrees[0]; });
  if (prof.uninformative) prof.warnings.push_back("all images share one attention degree; bins are arbitrary");

  auto bins = quantile_bins(prof.degrees, n_clusters);
  const auto merged = merge_single_class_bins(bins, test, prof.warnings);
  for (std::size_t k = 0; k < bins.size(); ++k) {
    Cluster c;
    c.id = k;
    std::sort(bins[k].begin(), bins[k].end());
    c.members = bins[k];
    c.merged = merged[k];
    for (auto i : c.members) c.mean_attention_degree += prof.degrees[i] / static_cast<double>(c.members.size());
    c.auroc_clean = 100.0 * pixel_auroc(clean.maps, test, c.members);
    c.auroc_adv = 100.0 * pixel_auroc(adv.maps, test, c.members);
    c.vulnerability = std::abs(c.auroc_clean - c.auroc_adv);
    prof.clusters.push_back(std::move(c));
  }
  return prof;
}

inline VulnerabilityProfile vulnerability_by_attention(const vit::ViTDetector& model,
                                                       const std::vector<datasets::TestSample>& test,
                                                       const attacks::AttackSpec& attack, std::size_t n_clusters = 5,
                                                       std::size_t batch = 16) {
  if (n_clusters < 2) throw std::invalid_argument("vulnerability_by_attention: need at least 2 clusters");
  if (test.size() < n_clusters) throw std::invalid_argument("vulnerability_by_attention: fewer images than clusters");
  auto loc = attack;
  if (loc.objective != attacks::Objective::SegPGDPatchwise) loc.objective = attacks::Objective::LocalizeMap;
  const auto clean = model_outputs(model, test, std::nullopt, batch);
  const auto adv = model_outputs(model, test, loc, batch);
  return profile_from_outputs(attention_degrees(model, test, batch), clean, adv, test, n_clusters);
}

inline std::string to_csv(const VulnerabilityProfile& p) {
  std::ostringstream os;
  os << "cluster_id,mean_attention_degree,auroc_clean,auroc_adv,vulnerability\n";
  os.precision(10);
  for (const auto& c : p.clusters)
    os << c.id << ',' << c.mean_attention_degree << ',' << c.auroc_clean << ',' << c.auroc_adv << ',' << c.vulnerability << '\n';
  return os.str();
}

/// Spearman correlation between cluster index and vulnerability.
inline double vulnerability_trend(const VulnerabilityProfile& p) {
  std::vector<double> idx, v;
  for (const auto& c : p.clusters) {
    idx.push_back(static_cast<double>(c.id));
    v.push_back(c.vulnerability);
  }
  return spearman(idx, v);
}

// ---------------------------------------------------------------------------

struct SpectralBound {
  double value = 0.0;    // largest singular value of the pseudo-inverse
  std::size_t rank = 0;  // numerical rank of the input
  bool full_rank = false;
};

/// 1 / (smallest nonzero singular value) of a row-stochastic matrix. Row-
/// stochastic orientation matches softmax over keys per query row; the
/// transpose has the same singular values.
inline SpectralBound spectral_bound(const Array& s) {
  if (s.rank() != 2 || s.shape[0] != s.shape[1] || s.shape[0] == 0)
    throw nd::ShapeError("spectral_bound: expected a non-empty square matrix, got " + nd::to_string(s.shape));
  const std::size_t n = s.shape[0];
  for (std::size_t r = 0; r < n; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (s[r * n + c] < 0.0) throw std::invalid_argument("spectral_bound: negative entry");
      sum += s[r * n + c];
    }
    if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("spectral_bound: row " + std::to_string(r) + " does not sum to 1");
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(s.data.data(),
                                                                                            static_cast<long>(n), static_cast<long>(n));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  const double tol = static_cast<double>(n) * sv(0) * std::numeric_limits<double>::epsilon();
  SpectralBound b;
  double smallest = sv(0);
  for (long i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) {
      ++b.rank;
      smallest = std::min(smallest, sv(i));
    }
  b.full_rank = b.rank == n;
  b.value = 1.0 / smallest;
  return b;
}

// ---------------------------------------------------------------------------

/// Side-by-side PNG: image | ground-truth mask | anomaly map (heat colours).
inline void write_heatmap(const std::filesystem::path& path, const Image& image, const Mask& mask, const Array& map) {
  const std::size_t H = height(image), W = width(image);
  Image out({H, 3 * W, 3}, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double m = mask.data[y * W + x], v = clip01(map.data[y * W + x]);
      const double heat[3] = {clip01(2.0 * v), clip01(2.0 * v - 0.5), clip01(2.0 * v - 1.0)};
      for (std::size_t c = 0; c < 3; ++c) {
        at(out, y, x, c) = at(image, y, x, channels(image) == 3 ? c : 0);
        at(out, y, W + x, c) = m;
        at(out, y, 2 * W + x, c) = heat[c];
      }
    }
  io::write_png(path, out);
}

}  // namespace patchguard::evalkit
