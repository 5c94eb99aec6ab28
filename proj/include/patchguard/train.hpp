#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchguard/attacks.hpp"
#include "patchguard/nd/checkpoint.hpp"
#include "patchguard/nd/optim.hpp"
#include "patchguard/pseudogen.hpp"
#include "patchguard/vit.hpp"

namespace patchguard::train {

namespace fs = std::filesystem;
using nd::Array;
using nd::Var;

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 16;
  double lr = 0.0008;
  double weight_decay = 1e-5;
  double lr_decay_factor = 0.0125;
  attacks::AttackSpec attack{.epsilon = 8.0 / 255.0, .step_size = 0.0, .iters = 10,
                             .objective = attacks::Objective::TrainLoss, .random_start = true};
  std::uint64_t seed = 0;
  std::size_t patience = 0;     // 0 disables early stopping
  double val_fraction = 0.1;    // held out only when early stopping is on
  pseudogen::GenOptions gen{};

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) throw std::invalid_argument("lr_decay_factor must be in (0, 1]");
    if (attack.objective != attacks::Objective::TrainLoss) throw std::invalid_argument("training attack must use the training loss");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("val_fraction must be in (0, 1)");
    attack.validate();
  }
};

/// One source image with its pseudo-anomaly and the attacked versions of both.
struct BatchQuad {
  Image x, x_anom, x_adv, x_anom_adv;
  Mask normal_mask, anom_mask;
  nlohmann::json manifest;
};

/// Builds quads for the given normals. Both the normal image (with an empty
/// mask) and the pseudo-anomaly (with its mask) are attacked on the training
/// loss. Failed generations are skipped and backfilled from the same pool.
inline std::vector<BatchQuad> build_batch(const std::vector<const Image*>& normals, const std::vector<const Image*>& pool,
                                          const saliency::SaliencyProvider& provider, const vit::ViTDetector& model,
                                          const attacks::AttackSpec& attack, const pseudogen::GenOptions& gen, Rng& rng,
                                          std::vector<std::string>* log = nullptr) {
  std::vector<BatchQuad> quads;
  std::size_t next_backfill = 0;
  std::vector<const Image*> queue = normals;
  for (std::size_t i = 0; i < queue.size() && quads.size() < normals.size(); ++i) {
    const Image& x = *queue[i];
    const std::uint64_t seed = rng.next_u64();
    try {
      auto ps = pseudogen::generate_pair(x, provider, seed, gen);
      quads.push_back({x, std::move(ps.image), {}, {}, zeros_mask(height(x), width(x)), std::move(ps.mask), std::move(ps.manifest)});
    } catch (const std::exception& e) {
      if (log) log->push_back(std::string("generation failed, sample skipped: ") + e.what());
      if (!pool.empty() && next_backfill < pool.size() * 2) queue.push_back(pool[next_backfill++ % pool.size()]);
    }
  }
  if (quads.empty()) return quads;
  if (attack.epsilon == 0.0) {  // the projection would return the inputs unchanged
    for (auto& q : quads) {
      q.x_adv = q.x;
      q.x_anom_adv = q.x_anom;
    }
    return quads;
  }

  std::vector<Image> ims;
  std::vector<Mask> masks;
  for (const auto& q : quads) {
    ims.push_back(q.x);
    masks.push_back(q.normal_mask);
  }
  for (const auto& q : quads) {
    ims.push_back(q.x_anom);
    masks.push_back(q.anom_mask);
  }
  auto spec = attack;
  spec.seed = rng.next_u64();
  const auto r = attacks::pgd_trainloss(model, vit::stack(ims), masks, spec);
  const std::size_t n = quads.size(), sz = quads[0].x.size();
  for (std::size_t k = 0; k < n; ++k) {
    auto slice = [&](std::size_t j) {
      Image im(quads[0].x.shape);
      std::copy(r.x.data.begin() + static_cast<long>(j * sz), r.x.data.begin() + static_cast<long>((j + 1) * sz), im.data.begin());
      return im;
    };
    quads[k].x_adv = slice(k);
    quads[k].x_anom_adv = slice(n + k);
  }
  if (r.aborted && log) log->push_back("training attack aborted on a non-finite gradient; last valid iterate used");
  return quads;
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_clean = 0.0;  // mean per image over x and x'
  double loss_adv = 0.0;    // mean per image over the attacked copies
  double attention_degree = 0.0;  // mean over clean members at the regularized layer
  std::optional<double> val_loss;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j = {{"epoch", e.epoch}, {"lr", e.lr}, {"loss_clean", e.loss_clean}, {"loss_adv", e.loss_adv},
                      {"attention_degree", e.attention_degree}, {"seconds", e.seconds}};
  if (e.val_loss) j["val_loss"] = *e.val_loss;
  return j;
}

enum class Status { Completed, EarlyStopped, HaltedNonFinite };

struct TrainResult {
  Status status = Status::Completed;
  std::size_t epochs_completed = 0;
  std::vector<EpochLog> log;
  std::vector<std::string> warnings;
  std::string halt_reason;
};

// ---------------------------------------------------------------------------
// Checkpoints carry the model, the optimizer moments and loop counters.

struct LoopState {
  std::size_t next_epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
};

inline nd::Checkpoint make_checkpoint(const vit::ViTDetector& model, const nd::OptimState& opt, const LoopState& ls) {
  auto ck = model.to_checkpoint();
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.tensors.emplace_back("opt.m." + params[i].name, opt.first_moment[i]);
    ck.tensors.emplace_back("opt.v." + params[i].name, opt.second_moment[i]);
  }
  ck.meta["train.next_epoch"] = std::to_string(ls.next_epoch);
  ck.meta["train.opt_step"] = std::to_string(opt.step);
  ck.meta["train.bad_epochs"] = std::to_string(ls.bad_epochs);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", ls.best_loss);
  ck.meta["train.best_loss"] = buf;
  return ck;
}

inline LoopState restore_checkpoint(const nd::Checkpoint& ck, vit::ViTDetector& model, nd::OptimState& opt) {
  model.load_weights(ck);
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Array* m = ck.find("opt.m." + params[i].name);
    const Array* v = ck.find("opt.v." + params[i].name);
    if (!m || !v) throw nd::CheckpointError("checkpoint lacks optimizer state for '" + params[i].name + "'");
    opt.first_moment[i] = *m;
    opt.second_moment[i] = *v;
  }
  auto meta = [&](const char* k) -> const std::string& {
    auto it = ck.meta.find(k);
    if (it == ck.meta.end()) throw nd::CheckpointError(std::string("checkpoint lacks '") + k + "'");
    return it->second;
  };
  opt.step = std::stoull(meta("train.opt_step"));
  LoopState ls;
  ls.next_epoch = std::stoull(meta("train.next_epoch"));
  ls.bad_epochs = std::stoull(meta("train.bad_epochs"));
  ls.best_loss = std::stod(meta("train.best_loss"));
  return ls;
}

struct RunPaths {
  fs::path root;
  fs::path config() const { return root / "config.resolved"; }
  fs::path log() const { return root / "log.jsonl"; }
  fs::path best() const { return root / "ckpt" / "best"; }
  fs::path last() const { return root / "ckpt" / "last"; }
};

/// Mean over clean images of the summed loss on a fixed validation set.
inline double validation_loss(const vit::ViTDetector& model, const std::vector<Image>& images, const std::vector<Mask>& masks,
                              std::size_t batch) {
  nd::FrozenParams frozen(model.parameters());
  double total = 0.0;
  for (std::size_t i = 0; i < images.size(); i += batch) {
    const std::size_t j = std::min(images.size(), i + batch);
    std::vector<Image> ims(images.begin() + static_cast<long>(i), images.begin() + static_cast<long>(j));
    std::vector<Mask> ms(masks.begin() + static_cast<long>(i), masks.begin() + static_cast<long>(j));
    total += vit::total_loss(model, nd::constant(vit::stack(ims)), ms).item();
  }
  return total / static_cast<double>(images.size());
}

struct TrainOptions {
  bool resume = false;
  std::string resolved_config{};  // written verbatim to config.resolved when non-empty
  std::function<void(const EpochLog&)> on_epoch{};
};

/// Adversarial training over the normal images. Writes log.jsonl and
/// ckpt/{best,last} under run_dir. The model is updated in place and holds the
/// last epoch's weights on return.
inline TrainResult train(const TrainConfig& cfg, vit::ViTDetector& model, const std::vector<Image>& normals,
                         const saliency::SaliencyProvider& provider, const fs::path& run_dir, const TrainOptions& opts = {}) {
  cfg.validate();
  if (normals.empty()) throw std::invalid_argument("train: no training images");
  const RunPaths paths{run_dir};
  fs::create_directories(run_dir / "ckpt");
  if (!opts.resolved_config.empty()) std::ofstream(paths.config()) << opts.resolved_config;

  auto& params = model.parameters();
  auto opt = nd::make_adamw_state(params, {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  LoopState ls;
  if (opts.resume) {
    if (!fs::exists(paths.last())) throw std::invalid_argument("cannot resume: " + paths.last().string() + " not found");
    ls = restore_checkpoint(nd::load_checkpoint(paths.last()), model, opt);
  } else {
    std::ofstream(paths.log(), std::ios::trunc);
  }

  // split off a fixed validation set when early stopping is on
  Rng split_rng(Rng::splitmix(cfg.seed ^ 0x5eedULL));
  std::vector<std::size_t> order(normals.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(split_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  std::vector<const Image*> train_set;
  std::vector<Image> val_images;
  std::vector<Mask> val_masks;
  const std::size_t n_val = cfg.patience > 0 && normals.size() >= 2
                                ? std::max<std::size_t>(1, static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(normals.size())))
                                : 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Image& im = normals[order[k]];
    if (k < n_val) {
      auto ps = pseudogen::generate_pair(im, provider, split_rng.next_u64(), cfg.gen);
      val_images.push_back(im);
      val_masks.push_back(zeros_mask(height(im), width(im)));
      val_images.push_back(std::move(ps.image));
      val_masks.push_back(std::move(ps.mask));
    } else {
      train_set.push_back(&im);
    }
  }
  std::sort(train_set.begin(), train_set.end());

  TrainResult res;
  if (!opts.resume) {
    const auto ck = make_checkpoint(model, opt, ls);
    nd::save_checkpoint(ck, paths.last());
    nd::save_checkpoint(ck, paths.best());
  }
  std::ofstream log_out(paths.log(), std::ios::app);
  const auto B = cfg.batch_size;

  for (std::size_t epoch = ls.next_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(Rng::splitmix(cfg.seed * 0x9E3779B97F4A7C15ULL + epoch + 1));
    opt.options.lr = nd::cosine_lr(static_cast<double>(epoch), cfg.lr, cfg.lr_decay_factor, static_cast<double>(cfg.epochs));
    std::vector<const Image*> perm = train_set;
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    EpochLog el;
    el.epoch = epoch;
    el.lr = opt.options.lr;
    std::size_t n_images = 0, n_deg = 0;
    bool halted = false;
    for (std::size_t s = 0; s < perm.size(); s += B) {
      std::vector<const Image*> chunk(perm.begin() + static_cast<long>(s), perm.begin() + static_cast<long>(std::min(perm.size(), s + B)));
      auto quads = build_batch(chunk, train_set, provider, model, cfg.attack, cfg.gen, rng, &res.warnings);
      if (quads.empty()) continue;
      std::vector<Image> clean_ims, adv_ims;
      std::vector<Mask> clean_masks, adv_masks;
      for (const auto& q : quads) {
        clean_ims.push_back(q.x);
        clean_masks.push_back(q.normal_mask);
      }
      for (const auto& q : quads) {
        clean_ims.push_back(q.x_anom);
        clean_masks.push_back(q.anom_mask);
      }
      for (const auto& q : quads) {
        adv_ims.push_back(q.x_adv);
        adv_masks.push_back(q.normal_mask);
      }
      for (const auto& q : quads) {
        adv_ims.push_back(q.x_anom_adv);
        adv_masks.push_back(q.anom_mask);
      }
      const auto f_clean = model.forward(nd::constant(vit::stack(clean_ims)));
      Var l_clean = vit::total_loss(model, f_clean, vit::batch_labels(clean_masks, model.config().patch_size));
      Var l_adv = vit::total_loss(model, nd::constant(vit::stack(adv_ims)), adv_masks);
      Var loss = nd::add(l_clean, l_adv);
      if (!std::isfinite(loss.item())) {
        res.status = Status::HaltedNonFinite;
        res.halt_reason = "non-finite loss in epoch " + std::to_string(epoch);
        halted = true;
        break;
      }
      nd::zero_grad(params);
      nd::backward(loss);
      try {
        nd::adamw_step(params, opt);
      } catch (const nd::NonFiniteGradient& e) {
        res.status = Status::HaltedNonFinite;
        res.halt_reason = e.what();
        halted = true;
        break;
      }
      nd::zero_grad(params);
      el.loss_clean += l_clean.item();
      el.loss_adv += l_adv.item();
      n_images += clean_ims.size();
      for (double d : vit::attention_degree_per_sample(model.reg_attention(f_clean).value(), model.config().effective_delta())) {
        el.attention_degree += d;
        ++n_deg;
      }
    }
    if (halted) {
      // restore the last good weights so the in-memory model matches ckpt/last
      restore_checkpoint(nd::load_checkpoint(paths.last()), model, opt);
      break;
    }
    if (n_images) {
      el.loss_clean /= static_cast<double>(n_images);
      el.loss_adv /= static_cast<double>(n_images);
    }
    if (n_deg) el.attention_degree /= static_cast<double>(n_deg);
    double monitored = el.loss_clean + el.loss_adv;
    if (!val_images.empty()) {
      el.val_loss = validation_loss(model, val_images, val_masks, 2 * B);
      monitored = *el.val_loss;
    }
    el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    ls.next_epoch = epoch + 1;
    const bool improved = monitored < ls.best_loss;
    if (improved) {
      ls.best_loss = monitored;
      ls.bad_epochs = 0;
    } else {
      ++ls.bad_epochs;
    }
    const auto ck = make_checkpoint(model, opt, ls);
    nd::save_checkpoint(ck, paths.last());
    if (improved) nd::save_checkpoint(ck, paths.best());
    log_out << to_json(el).dump() << '\n';
    log_out.flush();
    res.log.push_back(el);
    ++res.epochs_completed;
    if (opts.on_epoch) opts.on_epoch(el);
    if (cfg.patience > 0 && ls.bad_epochs >= cfg.patience) {
      res.status = Status::EarlyStopped;
      break;
    }
  }
  return res;
}

}  // namespace patchguard::train
