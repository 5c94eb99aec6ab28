// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance --fast   criteria 1-7 and 11 (about a minute)
//   acceptance --slow   criteria 8-10 (paired training runs, tens of minutes)
// Exit status is 0 only if every selected criterion passes.

#include <CLI11.hpp>

#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchguard/attacks.hpp"
#include "patchguard/datasets.hpp"
#include "patchguard/evalkit.hpp"
#include "patchguard/nd/gradcheck.hpp"
#include "patchguard/pseudogen.hpp"
#include "patchguard/saliency.hpp"
#include "patchguard/train.hpp"
#include "patchguard/vit.hpp"
#include "primitive_cases.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace patchguard;
using nd::Array;
using nd::Var;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  bool slow;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

vit::ViTConfig toy_config(std::size_t depth = 1) {
  vit::ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;  // P = 16
  c.dim = 8;
  c.depth = depth;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

Array random_attention(std::mt19937_64& rng, std::size_t b, std::size_t h, std::size_t p, double spread) {
  return nd::softmax_rows(nd::constant(pgtest::random_array(rng, {b, h, p, p}, -spread, spread))).value();
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::map<std::string, double> worst;

  for (const auto& pc : pgtest::primitive_cases())
    for (int trial = 0; trial < 20; ++trial) {
      auto [shape, op] = pc.make(rng);
      Array x = pgtest::random_array(rng, shape);
      auto f = pgtest::contracted(op, rng, op(nd::constant(x)).shape());
      auto rep = nd::finite_diff_check(f, x, 1e-5);
      const double e = rep.nonfinite.empty() ? rep.max_rel_error : INFINITY;
      worst[std::string("primitive ") + pc.name] = std::max(worst[std::string("primitive ") + pc.name], e);
    }

  for (int trial = 0; trial < 20; ++trial) {
    Array scores = pgtest::random_array(rng, {2, 16}, 0.05, 0.95);
    Array labels({2, 16});
    for (auto& v : labels.data) v = static_cast<double>(rng() % 2);
    auto rep = nd::finite_diff_check([&](const Var& s) { return vit::loss_ce(s, labels); }, scores, 1e-6);
    worst["loss_ce"] = std::max(worst["loss_ce"], rep.nonfinite.empty() ? rep.max_rel_error : INFINITY);
  }

  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t P = 9;
    const double delta = 1.0 / P;
    Array a = random_attention(rng, 2, 2, P, 3.0);
    for (auto& v : a.data)  // keep probes from flipping the gate
      if (std::abs(v - delta) < 1e-3) v += 2e-3;
    auto rep = nd::finite_diff_check([&](const Var& x) { return vit::regularizer(x, delta); }, a, 1e-6);
    worst["regularizer"] = std::max(worst["regularizer"], rep.nonfinite.empty() ? rep.max_rel_error : INFINITY);
  }

  for (std::uint64_t seed : {21u, 22u, 23u}) {
    vit::ViTDetector m(toy_config(1), seed);
    Var x = nd::constant(pgtest::random_array(rng, {1, 16, 16, 3}, 0.0, 1.0));
    Mask mask({16, 16}, 0.0);
    for (std::size_t y = 2; y < 9; ++y)
      for (std::size_t i = 5; i < 12; ++i) mask[y * 16 + i] = 1.0;
    const std::vector<Mask> masks{mask};
    auto rp = nd::finite_diff_check_params([&] { return vit::total_loss(m, x, masks); }, m.parameters(), 1e-5);
    auto rx = nd::finite_diff_check([&](const Var& xi) { return vit::total_loss(m, xi, masks); }, x.value(), 1e-5);
    worst["total_loss params"] = std::max(worst["total_loss params"], rp.nonfinite.empty() ? rp.max_rel_error : INFINITY);
    worst["total_loss input"] = std::max(worst["total_loss input"], rx.nonfinite.empty() ? rx.max_rel_error : INFINITY);
  }

  double overall = 0.0;
  std::string which;
  for (const auto& [k, v] : worst)
    if (v >= overall) {
      overall = v;
      which = k;
    }
  const double secs = seconds_since(t0);
  return {overall < 1e-3 && secs < 120.0,
          fmt("%zu checks, max rel err %.2e (%s) < 1e-3; %.1f s < 120 s", worst.size(), overall, which.c_str(), secs)};
}

// ---------------------------------------------------------------------------
// 2. Attack feasibility

Outcome attack_feasibility() {
  vit::ViTDetector model(toy_config(1), 5);
  std::mt19937_64 rng(77);
  const std::array objectives = {attacks::Objective::DetectScore, attacks::Objective::LocalizeMap,
                                 attacks::Objective::TrainLoss, attacks::Objective::SegPGDPatchwise};
  auto random_batch = [&] {
    Array x = pgtest::random_array(rng, {2, 16, 16, 3}, -0.2, 1.2);
    for (auto& v : x.data) v = std::clamp(v, 0.0, 1.0);  // some pixels sit exactly on the box faces
    std::vector<Mask> masks;
    for (int b = 0; b < 2; ++b) {
      Mask m({16, 16}, 0.0);
      if (rng() % 2)
        for (std::size_t y = rng() % 8; y < 12; ++y)
          for (std::size_t i = rng() % 8; i < 14; ++i) m[y * 16 + i] = 1.0;
      masks.push_back(m);
    }
    return std::pair{x, masks};
  };

  double worst_excess = -INFINITY;
  std::size_t out_of_box = 0, runs = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto [x, masks] = random_batch();
    attacks::AttackSpec spec;
    spec.objective = objectives[static_cast<std::size_t>(trial) % 4];
    spec.epsilon = std::uniform_real_distribution<double>(0.0, 16.0 / 255.0)(rng);
    spec.iters = 1 + rng() % 8;
    spec.random_start = trial % 2 == 0;
    spec.seed = static_cast<std::uint64_t>(trial);
    const auto r = attacks::run(model, x, masks, spec);
    for (std::size_t i = 0; i < x.size(); ++i) {
      worst_excess = std::max(worst_excess, std::abs(r.x[i] - x[i]) - spec.epsilon);
      out_of_box += r.x[i] < 0.0 || r.x[i] > 1.0;
    }
    ++runs;
  }

  std::size_t zero_budget_mismatch = 0;
  for (auto obj : objectives)
    for (bool rs : {false, true}) {
      auto [x, masks] = random_batch();
      const auto r = attacks::run(model, x, masks, {.epsilon = 0.0, .iters = 5, .objective = obj, .random_start = rs, .seed = 3});
      zero_budget_mismatch += !(r.x.data == x.data);
    }
  const bool pass = worst_excess <= 1e-9 && out_of_box == 0 && zero_budget_mismatch == 0;
  return {pass, fmt("%zu runs: max(|x*-x|-eps) = %.2e <= 1e-9, %zu pixels outside [0,1], eps=0 mismatches %zu/8", runs,
                    worst_excess, out_of_box, zero_budget_mismatch)};
}

// ---------------------------------------------------------------------------
// 3. Pseudo-anomaly structure

/// Point-in-convex-polygon test on the four rotated rectangle corners.
bool polygon_inside(double cy, double cx, double w, double h, double theta_deg, double py, double px) {
  const double t = theta_deg * std::numbers::pi / 180.0;
  const std::array<std::array<double, 2>, 4> local = {{{-w / 2, -h / 2}, {w / 2, -h / 2}, {w / 2, h / 2}, {-w / 2, h / 2}}};
  std::array<std::array<double, 2>, 4> pts;
  for (int i = 0; i < 4; ++i) {
    pts[i][0] = cx + local[i][0] * std::cos(t) - local[i][1] * std::sin(t);
    pts[i][1] = cy + local[i][0] * std::sin(t) + local[i][1] * std::cos(t);
  }
  for (int i = 0; i < 4; ++i) {
    const auto& a = pts[i];
    const auto& b = pts[(i + 1) % 4];
    if ((b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) < -1e-7) return false;
  }
  return true;
}

Outcome pseudo_anomaly_structure() {
  datasets::SynthSpec spec;
  spec.n_train = 50;
  spec.n_test = 0;
  spec.seed = 31;
  const auto sources = datasets::make_synthetic(spec).train;
  auto cam = std::make_shared<saliency::SmallCnn>(3, 4);
  saliency::GradCamProvider provider(cam, 3);

  std::size_t outside_changed = 0, raster_mismatch = 0, bounds_violations = 0, empty = 0;
  double w_min = 1, w_max = 0, h_min = 1, h_max = 0, t_min = 90, t_max = -90;
  for (std::size_t i = 0; i < 1000; ++i) {
    const Image& x = sources[i % sources.size()];
    const auto ps = pseudogen::generate_pair(x, provider, Rng::splitmix(i));
    const std::size_t H = height(x), W = width(x), C = channels(x);
    for (std::size_t p = 0; p < H * W; ++p)
      if (ps.mask[p] == 0.0)
        for (std::size_t c = 0; c < C; ++c) outside_changed += ps.image[p * C + c] != x[p * C + c];
    const auto& g = ps.manifest["geometry"];
    const double w = g["width"], h = g["height"], th = g["theta"];
    const double cy = ps.manifest["anchor"]["row"].get<double>(), cx = ps.manifest["anchor"]["col"].get<double>();
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c)
        raster_mismatch += (ps.mask[r * W + c] > 0.5) !=
                           polygon_inside(cy, cx, w, h, th, static_cast<double>(r), static_cast<double>(c));
    const double wf = w / static_cast<double>(W), hf = h / static_cast<double>(H);
    bounds_violations += wf < 0.05 || wf > 0.3 || hf < 0.05 || hf > 0.3 || th < -45.0 || th > 45.0;
    empty += mask_count(ps.mask) == 0;
    w_min = std::min(w_min, wf), w_max = std::max(w_max, wf), h_min = std::min(h_min, hf), h_max = std::max(h_max, hf);
    t_min = std::min(t_min, th), t_max = std::max(t_max, th);
  }
  const bool pass = outside_changed == 0 && raster_mismatch == 0 && bounds_violations == 0 && empty == 0;
  return {pass, fmt("1000 samples: outside-mask changes %zu, raster/oracle mismatches %zu, empty masks %zu; "
                    "w/W in [%.3f,%.3f], h/H in [%.3f,%.3f], theta in [%.1f,%.1f]",
                    outside_changed, raster_mismatch, empty, w_min, w_max, h_min, h_max, t_min, t_max)};
}

// ---------------------------------------------------------------------------
// 4. Patch label oracle

Outcome patch_label_oracle() {
  std::mt19937_64 rng(404);
  const std::array<std::size_t, 5> patch_sizes = {2, 4, 8, 14, 16};
  std::size_t mismatches = 0, positives = 0, total = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t ps = patch_sizes[rng() % patch_sizes.size()];
    const std::size_t g = 1 + rng() % 5, n = ps * g;
    Mask m({n, n}, 0.0);
    const double density = std::uniform_real_distribution<double>(0.0, trial % 3 == 0 ? 0.12 : 0.5)(rng);
    std::bernoulli_distribution on(density);
    for (auto& v : m.data) v = on(rng) ? 1.0 : 0.0;
    const Array labels = vit::patch_labels(m, ps);
    for (std::size_t pi = 0; pi < g; ++pi)
      for (std::size_t pj = 0; pj < g; ++pj) {
        std::size_t count = 0;
        for (std::size_t y = pi * ps; y < (pi + 1) * ps; ++y)
          for (std::size_t x = pj * ps; x < (pj + 1) * ps; ++x) count += m[y * n + x] == 1.0;
        // strictly more than 5% of the patch area, in exact integers
        const double expect = 20 * count > ps * ps ? 1.0 : 0.0;
        mismatches += labels[pi * g + pj] != expect;
        positives += expect == 1.0;
        ++total;
      }
  }
  return {mismatches == 0, fmt("10000 masks, %zu patches (%zu positive): %zu mismatches", total, positives, mismatches)};
}

// ---------------------------------------------------------------------------
// 5. AUROC oracle

Outcome auroc_oracle() {
  std::mt19937_64 rng(505);
  double worst = 0.0;
  std::size_t tied_instances = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 199;
    const bool ties = trial % 2 == 0;
    tied_instances += ties;
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ties ? static_cast<double>(rng() % 4) : std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      l[i] = static_cast<int>(rng() % 2);
    }
    l[0] = 0;
    l[1] = 1;
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (l[i] == 1 && l[j] == 0) {
          pairs += 1.0;
          wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    worst = std::max(worst, std::abs(evalkit::auroc(s, l) - wins / pairs));
  }
  return {worst <= 1e-12, fmt("100 instances (%zu heavy-tie), max |auroc - pairwise| = %.2e <= 1e-12", tied_instances, worst)};
}

// ---------------------------------------------------------------------------
// 6. Regularizer math

Outcome regularizer_math() {
  double uniform_err = 0.0;
  for (std::size_t H : {1u, 2u, 4u})
    for (std::size_t P : {4u, 16u, 64u, 196u}) {
      Array a({H, P, P}, 1.0 / static_cast<double>(P));
      const double r = vit::regularizer(nd::constant(a), 1.0 / static_cast<double>(P)).item();
      uniform_err = std::max(uniform_err, std::abs(r - 1.0 / static_cast<double>(H * P)));
    }

  std::mt19937_64 rng(606);
  double loop_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + rng() % 3, H = 1 + rng() % 3, P = 2 + rng() % 15;
    const double delta = 1.0 / static_cast<double>(P);
    Array a = random_attention(rng, B, H, P, 0.5 + static_cast<double>(rng() % 8));
    double expect = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      double den = 0.0;
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < P; ++j)
          for (std::size_t k = 0; k < P; ++k) {
            const double v = a[((b * H + i) * P + j) * P + k];
            if (v <= delta) den += v;
          }
      expect += 1.0 / (1e-8 + den);
    }
    const double got = vit::regularizer(nd::constant(a), delta).item();
    loop_err = std::max(loop_err, std::abs(got - expect) / std::max(1.0, std::abs(expect)));
  }

  // one dominant key per row, the rest share eps < delta; raising eps adds sub-threshold mass
  std::size_t monotone_cases = 0, monotone_failures = 0;
  for (std::size_t P : {4u, 8u, 16u, 64u})
    for (std::size_t H : {1u, 3u}) {
      const double delta = 1.0 / static_cast<double>(P);
      auto build = [&](double eps) {
        Array a({H, P, P});
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t q = 0; q < P; ++q)
            for (std::size_t k = 0; k < P; ++k)
              a[(h * P + q) * P + k] = k == (q + h) % P ? 1.0 - static_cast<double>(P - 1) * eps : eps;
        return a;
      };
      double prev = INFINITY;
      for (double frac : {0.01, 0.1, 0.3, 0.6, 0.9}) {
        const double r = vit::regularizer(nd::constant(build(frac * delta)), delta).item();
        ++monotone_cases;
        monotone_failures += !(r < prev);
        prev = r;
      }
    }
  const bool pass = uniform_err <= 1e-9 && loop_err <= 1e-9 && monotone_failures == 0;
  return {pass, fmt("uniform |R - 1/(heads*P)| = %.1e; loop oracle max rel err %.1e over 100 tensors; "
                    "monotone decrease %zu/%zu steps",
                    uniform_err, loop_err, monotone_cases - monotone_failures, monotone_cases)};
}

// ---------------------------------------------------------------------------
// 7. Spectral probe

Outcome spectral_probe() {
  bool identity_exact = true;
  for (std::size_t n : {1u, 2u, 16u, 64u}) {
    Array eye({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    identity_exact = identity_exact && evalkit::spectral_bound(eye).value == 1.0;
  }
  std::mt19937_64 rng(707);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double lowest = INFINITY;
  for (int trial = 0; trial < 1000; ++trial) {
    Array s({16, 16});
    const double power = 1.0 + trial % 8;  // higher powers give sparser rows
    for (std::size_t r = 0; r < 16; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 16; ++c) sum += s[r * 16 + c] = std::pow(u(rng), power);
      for (std::size_t c = 0; c < 16; ++c) s[r * 16 + c] /= sum;
    }
    lowest = std::min(lowest, evalkit::spectral_bound(s).value);
  }
  return {identity_exact && lowest >= 1.0 - 1e-9,
          fmt("identity exactly 1: %s; min bound over 1000 random 16x16 row-stochastic = %.12f >= 1 - 1e-9",
              identity_exact ? "yes" : "no", lowest)};
}

// ---------------------------------------------------------------------------
// 11. Determinism through the command-line tool

int run_cli(const std::string& cli, const std::string& args) {
  const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

/// Log records without the wall-clock field.
std::string log_without_timing(const fs::path& p) {
  std::ifstream in(p);
  std::string line, out;
  while (std::getline(in, line)) {
    auto j = json::parse(line);
    j.erase("seconds");
    out += j.dump() + "\n";
  }
  return out;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

Outcome determinism(const std::string& cli, const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto p = [&](const char* rel) { return (dir / rel).string(); };
  if (run_cli(cli, "synth-data --out " + p("data") + " --size 32 --n-train 8 --n-test 6 --seed 11") != 0)
    return {false, "synth-data failed"};
  const std::string gen = "gen --deterministic --data " + p("data") + " --image-size 32 --seed 5 --out ";
  const std::string train = "train --deterministic --data " + p("data") +
                            " --epochs 2 --seed 5 --image-size 32 --patch-size 8 --dim 16 --depth 2 --heads 2 "
                            "--mlp-ratio 2 --batch-size 4 --out ";
  for (const char* run : {"gen_a", "gen_b"})
    if (run_cli(cli, gen + p(run)) != 0) return {false, fmt("gen run %s failed", run)};
  for (const char* run : {"train_a", "train_b"})
    if (run_cli(cli, train + p(run)) != 0) return {false, fmt("train run %s failed", run)};

  auto ga = tree_bytes(p("gen_a")), gb = tree_bytes(p("gen_b"));
  ga.erase("config.resolved");  // holds the output path
  gb.erase("config.resolved");
  std::size_t corpus_files = ga.size(), corpus_diff = 0;
  for (const auto& [k, v] : ga) corpus_diff += !gb.count(k) || gb[k] != v;
  corpus_diff += ga.size() != gb.size();

  std::size_t ckpt_diff = 0;
  for (const char* f : {"ckpt/last", "ckpt/best", "ckpt/backbone"})
    ckpt_diff += slurp(dir / "train_a" / f) != slurp(dir / "train_b" / f) || slurp(dir / "train_a" / f).empty();
  const bool log_same = log_without_timing(dir / "train_a" / "log.jsonl") == log_without_timing(dir / "train_b" / "log.jsonl");
  fs::remove_all(dir);
  return {corpus_diff == 0 && ckpt_diff == 0 && log_same,
          fmt("gen: %zu files, %zu differ; train (2 epochs): %zu of 3 checkpoints differ, loss log %s", corpus_files,
              corpus_diff, ckpt_diff, log_same ? "identical" : "differs")};
}

// ---------------------------------------------------------------------------
// 8-10. Paired training runs on the synthetic value-noise dataset

struct SlowSetup {
  std::size_t seeds = 3;
  std::size_t epochs = 30;
  std::size_t n_train = 40;
  std::size_t n_test = 60;
  std::size_t batch = 8;
  double lr = 0.0008;
  std::size_t eval_iters = 200;
  std::uint64_t data_seed = 0;
};

vit::ViTConfig desk_config(double alpha) {
  vit::ViTConfig c;  // 64 x 64 input, 8 x 8 patches, P = 64
  c.dim = 32;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.reg_weight = alpha;
  return c;
}

struct ModelRecord {
  double degree_test = 0.0;   // mean attention degree at reg_layer on clean test images
  double degree_train = 0.0;  // last-epoch training-log value
  double pixel_clean = 0.0, pixel_adv = 0.0;
  double train_seconds = 0.0, eval_seconds = 0.0;
  std::optional<evalkit::VulnerabilityProfile> profile;
  json to_json() const {
    json j = {{"attention_degree_test", degree_test}, {"attention_degree_train", degree_train},
              {"pixel_auroc_clean", pixel_clean},     {"pixel_auroc_adv", pixel_adv},
              {"train_seconds", train_seconds},       {"eval_seconds", eval_seconds}};
    if (profile) {
      json rows = json::array();
      for (const auto& c : profile->clusters)
        rows.push_back({{"cluster_id", c.id}, {"mean_attention_degree", c.mean_attention_degree},
                        {"auroc_clean", c.auroc_clean}, {"auroc_adv", c.auroc_adv}, {"vulnerability", c.vulnerability}});
      j["clusters"] = rows;
      j["spearman"] = evalkit::vulnerability_trend(*profile);
    }
    return j;
  }
};

struct SeedRecord {
  ModelRecord reg, plain, clean;  // adversarial alpha=1, adversarial alpha=0, clean-trained alpha=1
};

class SlowExperiments {
 public:
  SlowExperiments(SlowSetup setup, fs::path work) : setup_(setup), work_(std::move(work)) {}

  const std::vector<SeedRecord>& records() {
    if (records_.empty()) run();
    return records_;
  }
  const SlowSetup& setup() const { return setup_; }

  json to_json() {
    json out = json::array();
    for (std::size_t s = 0; s < records().size(); ++s)
      out.push_back({{"seed", s},
                     {"adversarial_alpha1", records_[s].reg.to_json()},
                     {"adversarial_alpha0", records_[s].plain.to_json()},
                     {"clean_alpha1", records_[s].clean.to_json()}});
    return out;
  }

 private:
  ModelRecord train_and_eval(const datasets::DatasetSplit& data, std::uint64_t seed, double alpha, double train_eps,
                             bool profile, const std::string& tag) {
    ModelRecord rec;
    auto t0 = std::chrono::steady_clock::now();
    vit::ViTDetector model(desk_config(alpha), seed);
    train::TrainConfig tc;
    tc.epochs = setup_.epochs;
    tc.batch_size = setup_.batch;
    tc.lr = setup_.lr;
    tc.seed = seed;
    tc.attack.epsilon = train_eps;  // PGD-10, random start, training loss
    saliency::OracleProvider uniform_anchor;  // textures: every pixel is foreground
    const auto res = train::train(tc, model, data.train, uniform_anchor, work_ / tag);
    if (res.status == train::Status::HaltedNonFinite) throw std::runtime_error(tag + ": " + res.halt_reason);
    rec.degree_train = res.log.empty() ? 0.0 : res.log.back().attention_degree;
    rec.train_seconds = seconds_since(t0);

    t0 = std::chrono::steady_clock::now();
    const auto degrees = evalkit::attention_degrees(model, data.test, 16);
    for (double d : degrees) rec.degree_test += d / static_cast<double>(degrees.size());
    attacks::AttackSpec pgd{.epsilon = 8.0 / 255.0, .iters = setup_.eval_iters, .objective = attacks::Objective::LocalizeMap,
                            .seed = seed};
    const auto clean = evalkit::model_outputs(model, data.test, std::nullopt, 16);
    const auto adv = evalkit::model_outputs(model, data.test, pgd, 16);
    const auto all = evalkit::all_indices(data.test.size());
    rec.pixel_clean = 100.0 * evalkit::pixel_auroc(clean.maps, data.test, all);
    rec.pixel_adv = 100.0 * evalkit::pixel_auroc(adv.maps, data.test, all);
    if (profile) rec.profile = evalkit::profile_from_outputs(degrees, clean, adv, data.test, 5);
    rec.eval_seconds = seconds_since(t0);
    std::cerr << fmt("  %-14s deg %.2f  pixel AUROC %.1f -> %.1f  (train %.0f s, eval %.0f s)\n", tag.c_str(),
                     rec.degree_test, rec.pixel_clean, rec.pixel_adv, rec.train_seconds, rec.eval_seconds);
    return rec;
  }

  void run() {
    datasets::SynthSpec spec;  // value-noise, 64 x 64
    spec.n_train = setup_.n_train;
    spec.n_test = setup_.n_test;
    spec.seed = setup_.data_seed;
    const auto data = datasets::make_synthetic(spec);
    for (std::size_t s = 0; s < setup_.seeds; ++s) {
      const std::uint64_t seed = 1000 + s;
      std::cerr << "seed " << seed << "\n";
      SeedRecord r;
      r.reg = train_and_eval(data, seed, 1.0, 8.0 / 255.0, false, "adv_a1_s" + std::to_string(s));
      r.plain = train_and_eval(data, seed, 0.0, 8.0 / 255.0, false, "adv_a0_s" + std::to_string(s));
      r.clean = train_and_eval(data, seed, 1.0, 0.0, true, "clean_a1_s" + std::to_string(s));
      records_.push_back(std::move(r));
    }
  }

  SlowSetup setup_;
  fs::path work_;
  std::vector<SeedRecord> records_;
};

Outcome regularization_effect(SlowExperiments& ex) {
  const auto& recs = ex.records();
  std::size_t higher = 0;
  double gap = 0.0;
  std::string per_seed;
  for (const auto& r : recs) {
    higher += r.reg.degree_test > r.plain.degree_test;
    gap += (r.reg.pixel_adv - r.plain.pixel_adv) / static_cast<double>(recs.size());
    per_seed += fmt(" [deg %.2f vs %.2f, adv %.1f vs %.1f]", r.reg.degree_test, r.plain.degree_test, r.reg.pixel_adv,
                    r.plain.pixel_adv);
  }
  const bool pass = higher == recs.size() && gap >= 3.0;
  return {pass, fmt("(a) alpha=1 degree higher in %zu/%zu seeds; (b) seed-mean adversarial pixel AUROC gap %+.2f (need >= +3.00);",
                    higher, recs.size(), gap) +
                    per_seed};
}

Outcome adversarial_training_effect(SlowExperiments& ex) {
  const auto& recs = ex.records();
  double clean_drop = 0.0, adv_drop = 0.0;
  for (const auto& r : recs) {
    clean_drop += (r.clean.pixel_clean - r.clean.pixel_adv) / static_cast<double>(recs.size());
    adv_drop += (r.reg.pixel_clean - r.reg.pixel_adv) / static_cast<double>(recs.size());
  }
  return {clean_drop >= 30.0 && adv_drop <= 15.0,
          fmt("seed-mean pixel AUROC drop under PGD-%zu: clean-trained %.1f (need >= 30), adversarially trained %.1f (need <= 15)",
              ex.setup().eval_iters, clean_drop, adv_drop)};
}

Outcome attention_vulnerability_trend(SlowExperiments& ex) {
  const auto& recs = ex.records();
  std::size_t negative = 0;
  std::string rhos;
  for (const auto& r : recs) {
    const double rho = evalkit::vulnerability_trend(*r.clean.profile);
    negative += rho < 0.0;
    rhos += fmt(" %.2f", rho);
  }
  return {negative + 1 >= recs.size() && negative > 0,
          fmt("Spearman(cluster, vulnerability) < 0 in %zu/%zu seeds (one exception allowed); rho:", negative, recs.size()) + rhos};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  bool fast = false, slow = false;
  std::vector<int> only;
  std::string cli = PATCHGUARD_CLI;
  std::string work = (fs::temp_directory_path() / "patchguard_acceptance").string();
  std::string report;
  app.add_flag("--fast", fast, "Criteria 1-7 and 11");
  app.add_flag("--slow", slow, "Criteria 8-10");
  app.add_option("--only", only, "Run only these criterion numbers");
  app.add_option("--cli", cli, "Path to the patchguard executable");
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--report", report, "Write a JSON summary here");
  CLI11_PARSE(app, argc, argv);
  if (!fast && !slow && only.empty()) fast = slow = true;

  fs::create_directories(work);
  SlowExperiments experiments(SlowSetup{}, fs::path(work) / "slow");
  const std::vector<Criterion> criteria = {
      {1, "gradient-fidelity", false, gradient_fidelity},
      {2, "attack-feasibility", false, attack_feasibility},
      {3, "pseudo-anomaly-structure", false, pseudo_anomaly_structure},
      {4, "patch-label-oracle", false, patch_label_oracle},
      {5, "auroc-oracle", false, auroc_oracle},
      {6, "regularizer-math", false, regularizer_math},
      {7, "spectral-probe", false, spectral_probe},
      {8, "regularization-effect", true, [&] { return regularization_effect(experiments); }},
      {9, "adversarial-training-effect", true, [&] { return adversarial_training_effect(experiments); }},
      {10, "attention-vulnerability-trend", true, [&] { return attention_vulnerability_trend(experiments); }},
      {11, "determinism", false, [&] { return determinism(cli, work); }},
  };

  json summary = json::array();
  bool all_pass = true;
  const auto t_all = std::chrono::steady_clock::now();
  for (const auto& c : criteria) {
    const bool selected = only.empty() ? (c.slow ? slow : fast) : std::find(only.begin(), only.end(), c.id) != only.end();
    if (!selected) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    all_pass = all_pass && o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << c.id << " " << c.name << ": " << o.detail << fmt(" (%.1f s)", secs)
              << std::endl;
    summary.push_back({{"criterion", c.id}, {"name", c.name}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", secs}});
  }
  std::cout << fmt("total %.1f s", seconds_since(t_all)) << std::endl;
  if (!report.empty()) {
    json out = {{"criteria", summary}};
    if (slow || std::any_of(only.begin(), only.end(), [](int i) { return i >= 8 && i <= 10; }))
      out["experiments"] = experiments.to_json();
    std::ofstream(report) << out.dump(2) << '\n';
  }
  return all_pass ? 0 : 1;
}
