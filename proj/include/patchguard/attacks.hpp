#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchguard/nd/autodiff.hpp"
#include "patchguard/nd/optim.hpp"
#include "patchguard/rng.hpp"
#include "patchguard/vit.hpp"

namespace patchguard::attacks {

using nd::Array;
using nd::Var;

enum class Objective { DetectScore, LocalizeMap, TrainLoss, SegPGDPatchwise };

inline std::string objective_name(Objective o) {
  switch (o) {
    case Objective::DetectScore: return "detect";
    case Objective::LocalizeMap: return "localize";
    case Objective::TrainLoss: return "trainloss";
    case Objective::SegPGDPatchwise: return "segpgd";
  }
  return "?";
}

inline Objective objective_from_name(const std::string& s) {
  for (auto o : {Objective::DetectScore, Objective::LocalizeMap, Objective::TrainLoss, Objective::SegPGDPatchwise})
    if (objective_name(o) == s) return o;
  throw std::invalid_argument("unknown attack objective '" + s + "'");
}

/// l-infinity sign-gradient attack settings. step_size <= 0 selects
/// 2.5 * epsilon / iters.
struct AttackSpec {
  double epsilon = 8.0 / 255.0;
  double step_size = 0.0;
  std::size_t iters = 10;
  Objective objective = Objective::TrainLoss;
  bool random_start = false;
  std::uint64_t seed = 0;

  double step() const {
    if (step_size > 0.0) return step_size;
    return iters ? 2.5 * epsilon / static_cast<double>(iters) : 0.0;
  }

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("attack: epsilon must be >= 0");
    if (!std::isfinite(step_size) || step_size < 0.0) throw std::invalid_argument("attack: step size must be >= 0 (0 = auto)");
  }

  bool operator==(const AttackSpec&) const = default;
};

/// Single full-budget step without random start.
inline AttackSpec fgsm(double epsilon, Objective objective) {
  return {.epsilon = epsilon, .step_size = epsilon, .iters = 1, .objective = objective, .random_start = false};
}

inline nlohmann::json to_json(const AttackSpec& s) {
  return {{"epsilon", s.epsilon},           {"step_size", s.step_size},
          {"iters", s.iters},               {"objective", objective_name(s.objective)},
          {"random_start", s.random_start}, {"seed", s.seed}};
}

inline AttackSpec spec_from_json(const nlohmann::json& j) {
  AttackSpec s;
  s.epsilon = j.at("epsilon").get<double>();
  s.step_size = j.value("step_size", 0.0);
  s.iters = j.at("iters").get<std::size_t>();
  s.objective = objective_from_name(j.at("objective").get<std::string>());
  s.random_start = j.value("random_start", false);
  s.seed = j.value("seed", std::uint64_t{0});
  s.validate();
  return s;
}

struct AttackResult {
  Array x;
  bool aborted = false;  // non-finite objective or gradient; x is the last valid iterate
  std::size_t steps = 0;
};

/// Objective to ascend, given the current iterate and the step index.
using ObjectiveFn = std::function<Var(const Var& x, std::size_t step)>;

/// Clamps x into the epsilon ball around x0 and into [0, 1].
inline void project(Array& x, const Array& x0, double eps) {
  for (std::size_t i = 0; i < x.size(); ++i)
    x[i] = std::clamp(std::clamp(x[i], x0[i] - eps, x0[i] + eps), 0.0, 1.0);
}

/// Sign-gradient ascent with projection after every step.
inline AttackResult pgd_ascent(const Array& x0, const AttackSpec& spec, const ObjectiveFn& objective) {
  spec.validate();
  AttackResult r{x0, false, 0};
  const double eps = spec.epsilon;
  if (spec.random_start && eps > 0.0) {
    Rng rng(spec.seed);
    for (auto& v : r.x.data) v += rng.uniform(-eps, eps);
    project(r.x, x0, eps);
  }
  const double step = spec.step();
  for (std::size_t t = 0; t < spec.iters; ++t) {
    Var xv = nd::leaf(r.x, true);
    Var obj = objective(xv, t);
    if (!std::isfinite(obj.item())) {
      r.aborted = true;
      break;
    }
    nd::backward(obj);
    const Array& g = xv.grad();
    if (!g.all_finite()) {
      r.aborted = true;
      break;
    }
    for (std::size_t i = 0; i < r.x.size(); ++i) r.x[i] += step * static_cast<double>((g[i] > 0.0) - (g[i] < 0.0));
    project(r.x, x0, eps);
    ++r.steps;
  }
  return r;
}

/// +1 for normal patches, -1 for anomalous ones, from [B, P] 0/1 labels.
inline Array patch_signs(const Array& labels) {
  Array y(labels.shape);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = labels[i] > 0.5 ? -1.0 : 1.0;
  return y;
}

/// Detection attack on a batch [B, H, W, C]: ascends sum_b y_b * S(x_b) where
/// S is the top-k image score; y = +1 pushes a normal image's score up.
inline AttackResult pgd_detect(const vit::ViTDetector& model, const Array& x, const std::vector<double>& y,
                               const AttackSpec& spec) {
  if (y.size() != x.shape.at(0)) throw std::invalid_argument("pgd_detect: one sign per image required");
  for (double v : y)
    if (v != 1.0 && v != -1.0) throw std::invalid_argument("pgd_detect: signs must be +1 or -1");
  nd::FrozenParams frozen(model.parameters());
  const Array signs({y.size()}, y);
  return pgd_ascent(x, spec, [&](const Var& xv, std::size_t) {
    Var s = vit::image_score(model.forward(xv).scores, model.config().topk);
    return nd::sum(nd::mul(s, nd::constant(signs)));
  });
}

/// Localization attack: ascends sum(Y * M) with Y a [B, P] grid of +-1.
inline AttackResult pgd_localize(const vit::ViTDetector& model, const Array& x, const Array& patch_sign,
                                 const AttackSpec& spec) {
  const std::size_t P = model.config().tokens();
  if (patch_sign.shape != nd::Shape{x.shape.at(0), P}) throw nd::shape_error("pgd_localize", patch_sign.shape, {x.shape.at(0), P});
  for (double v : patch_sign.data)
    if (v != 1.0 && v != -1.0) throw std::invalid_argument("pgd_localize: signs must be +1 or -1");
  nd::FrozenParams frozen(model.parameters());
  return pgd_ascent(x, spec, [&](const Var& xv, std::size_t) {
    return nd::sum(nd::mul(model.forward(xv).scores, nd::constant(patch_sign)));
  });
}

/// Min-max inner step: ascends the training loss for the given masks.
inline AttackResult pgd_trainloss(const vit::ViTDetector& model, const Array& x, const std::vector<Mask>& masks,
                                  const AttackSpec& spec) {
  const Array labels = vit::batch_labels(masks, model.config().patch_size);
  if (labels.shape.at(0) != x.shape.at(0)) throw std::invalid_argument("pgd_trainloss: one mask per image required");
  nd::FrozenParams frozen(model.parameters());
  return pgd_ascent(x, spec, [&](const Var& xv, std::size_t) { return vit::total_loss(model, model.forward(xv), labels); });
}

/// Weight schedule for patch-wise SegPGD: step t of T weights correctly
/// classified patches by 1 - t / (2T) and misclassified ones by t / (2T).
inline double segpgd_lambda(std::size_t t, std::size_t iters) {
  return iters ? static_cast<double>(t) / (2.0 * static_cast<double>(iters)) : 0.0;
}

/// Per-patch weights for the current iterate's logits.
inline Array segpgd_weights(const Array& logits, const Array& labels, double lambda) {
  Array w(logits.shape);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const bool predicted_anomalous = logits[i] > 0.0;
    const bool correct = predicted_anomalous == (labels[i] > 0.5);
    w[i] = correct ? 1.0 - lambda : lambda;
  }
  return w;
}

/// SegPGD at patch granularity on the per-patch cross-entropy.
inline AttackResult segpgd_patchwise(const vit::ViTDetector& model, const Array& x, const Array& labels,
                                     const AttackSpec& spec) {
  const std::size_t P = model.config().tokens();
  if (labels.shape != nd::Shape{x.shape.at(0), P}) throw nd::shape_error("segpgd_patchwise", labels.shape, {x.shape.at(0), P});
  nd::FrozenParams frozen(model.parameters());
  return pgd_ascent(x, spec, [&](const Var& xv, std::size_t t) {
    Var z = model.forward(xv).logits;
    const Array w = segpgd_weights(z.value(), labels, segpgd_lambda(t, spec.iters));
    // per-patch CE from logits: softplus(z) - y z
    Var ce = nd::sub(nd::softplus(z), nd::mul(z, nd::constant(labels)));
    return nd::sum(nd::mul(ce, nd::constant(w)));
  });
}

/// Dispatches on spec.objective. `labels` are [B, P] 0/1 patch labels; the
/// detection sign of an image is +1 iff it has no anomalous patch.
inline AttackResult run(const vit::ViTDetector& model, const Array& x, const std::vector<Mask>& masks,
                        const AttackSpec& spec) {
  const Array labels = vit::batch_labels(masks, model.config().patch_size);
  switch (spec.objective) {
    case Objective::DetectScore: {
      std::vector<double> y;
      for (const auto& m : masks) y.push_back(mask_count(m) > 0 ? -1.0 : 1.0);
      return pgd_detect(model, x, y, spec);
    }
    case Objective::LocalizeMap: return pgd_localize(model, x, patch_signs(labels), spec);
    case Objective::TrainLoss: return pgd_trainloss(model, x, masks, spec);
    case Objective::SegPGDPatchwise: return segpgd_patchwise(model, x, labels, spec);
  }
  throw std::logic_error("unreachable");
}

}  // namespace patchguard::attacks
