#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchguard/image.hpp"
#include "patchguard/nd/autodiff.hpp"
#include "patchguard/nd/checkpoint.hpp"
#include "patchguard/nd/optim.hpp"
#include "patchguard/rng.hpp"

namespace patchguard::vit {

using nd::Array;
using nd::Shape;
using nd::Var;

/// reg_layer value selecting the discriminator's own attention.
inline constexpr int kDiscriminatorLayer = -1;

struct ViTConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t dim = 128;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  int reg_layer = kDiscriminatorLayer;
  double delta = 0.0;  // 0 means 1 / P
  double reg_weight = 1.0;
  std::size_t topk = 5;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  double effective_delta() const { return delta > 0.0 ? delta : 1.0 / static_cast<double>(tokens()); }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ViTConfig: " + m); };
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
           std::to_string(patch_size));
    if (channels == 0 || dim == 0 || heads == 0 || dim % heads != 0)
      fail("dim must be a positive multiple of heads");
    if (mlp_ratio == 0) fail("mlp_ratio must be positive");
    if (delta < 0.0) fail("delta must be positive");
    if (reg_weight < 0.0) fail("reg_weight must be non-negative");
    if (topk < 1 || topk > tokens()) fail("topk outside [1, P]");
    if (reg_layer != kDiscriminatorLayer && (reg_layer < 0 || reg_layer >= static_cast<int>(depth)))
      fail("reg_layer must be 'disc' or an encoder layer index");
  }

  bool operator==(const ViTConfig&) const = default;
};

/// Key/value text form used by the checkpoint sidecar and run configs.
inline std::map<std::string, std::string> to_kv(const ViTConfig& c) {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {{"image_size", std::to_string(c.image_size)},
          {"patch_size", std::to_string(c.patch_size)},
          {"channels", std::to_string(c.channels)},
          {"dim", std::to_string(c.dim)},
          {"depth", std::to_string(c.depth)},
          {"heads", std::to_string(c.heads)},
          {"mlp_ratio", std::to_string(c.mlp_ratio)},
          {"reg_layer", c.reg_layer == kDiscriminatorLayer ? "disc" : std::to_string(c.reg_layer)},
          {"delta", num(c.delta)},
          {"alpha", num(c.reg_weight)},
          {"topk", std::to_string(c.topk)}};
}

inline ViTConfig from_kv(const std::map<std::string, std::string>& kv, ViTConfig c = {}) {
  auto get = [&](const char* k) -> std::optional<std::string> {
    auto it = kv.find(k);
    return it == kv.end() ? std::nullopt : std::optional(it->second);
  };
  auto uz = [](const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); };
  if (auto v = get("image_size")) c.image_size = uz(*v);
  if (auto v = get("patch_size")) c.patch_size = uz(*v);
  if (auto v = get("channels")) c.channels = uz(*v);
  if (auto v = get("dim")) c.dim = uz(*v);
  if (auto v = get("depth")) c.depth = uz(*v);
  if (auto v = get("heads")) c.heads = uz(*v);
  if (auto v = get("mlp_ratio")) c.mlp_ratio = uz(*v);
  if (auto v = get("reg_layer")) c.reg_layer = *v == "disc" ? kDiscriminatorLayer : std::stoi(*v);
  if (auto v = get("delta")) c.delta = std::stod(*v);
  if (auto v = get("alpha")) c.reg_weight = std::stod(*v);
  if (auto v = get("topk")) c.topk = uz(*v);
  return c;
}

struct Forward {
  Var embeddings;               // [B, P, D] encoder output
  std::vector<Var> attentions;  // per encoder layer, [B, heads, P, P]
  Var disc_attention;           // [B, heads, P, P]
  Var logits;                   // [B, P]
  Var scores;                   // [B, P], sigmoid(logits)
};

namespace detail {

struct Linear {
  Var w, b;  // w: [in, out]
  Var operator()(const Var& x) const { return nd::add(nd::matmul(x, w), b); }
};

struct Norm {
  Var gain, bias;
  Var operator()(const Var& x) const { return nd::layer_norm(x, gain, bias); }
};

struct Attention {
  Linear q;
  Var k;  // no key bias: softmax over keys cancels it, so its gradient is identically zero
  Linear v, out;
};

struct Block {
  Norm ln1;
  Attention attn;
  Norm ln2;
  Linear fc1, fc2;
};

inline Array xavier(Rng& rng, std::size_t in, std::size_t out) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Array w({in, out});
  for (auto& v : w.data) v = rng.uniform(-a, a);
  return w;
}

}  // namespace detail

/// From-scratch ViT encoder followed by the attention discriminator.
class ViTDetector {
 public:
  explicit ViTDetector(ViTConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.dim, hidden = cfg_.dim * cfg_.mlp_ratio;
    embed_ = linear(rng, "embed", cfg_.patch_dim(), d);
    Array pos({cfg_.tokens(), d});
    for (auto& v : pos.data) v = 0.02 * rng.normal();
    pos_ = add_param("pos", std::move(pos));
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      detail::Block b;
      b.ln1 = norm(p + "ln1", d);
      b.attn = attention(rng, p + "attn", d);
      b.ln2 = norm(p + "ln2", d);
      b.fc1 = linear(rng, p + "fc1", d, hidden);
      b.fc2 = linear(rng, p + "fc2", hidden, d);
      blocks_.push_back(std::move(b));
    }
    disc_ln1_ = norm("disc.ln1", d);
    disc_attn_ = attention(rng, "disc.attn", d);
    disc_ln2_ = norm("disc.ln2", d);
    disc_fc1_ = linear(rng, "disc.fc1", d, hidden);
    disc_fc2_ = linear(rng, "disc.fc2", hidden, 1);
  }

  ViTDetector(const ViTDetector&) = delete;
  ViTDetector& operator=(const ViTDetector&) = delete;
  ViTDetector(ViTDetector&&) = default;
  ViTDetector& operator=(ViTDetector&&) = default;

  const ViTConfig& config() const { return cfg_; }
  const nd::ParamList& parameters() const { return params_; }
  nd::ParamList& parameters() { return params_; }

  /// images: [B, H, W, C] -> [B, P, D] (linear patch projection plus positions).
  Var patchify(const Var& images) const {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != cfg_.image_size || s[2] != cfg_.image_size || s[3] != cfg_.channels)
      throw nd::ShapeError("patchify: expected [B," + std::to_string(cfg_.image_size) + "," +
                           std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.channels) +
                           "], got " + nd::to_string(s));
    const std::size_t B = s[0], g = cfg_.grid(), p = cfg_.patch_size;
    Var t = nd::reshape(images, {B, g, p, g, p, cfg_.channels});
    t = nd::permute(t, {0, 1, 3, 2, 4, 5});
    t = nd::reshape(t, {B, cfg_.tokens(), cfg_.patch_dim()});
    return nd::add(embed_(t), pos_);
  }

  /// Encoder output and every encoder layer's attention.
  std::pair<Var, std::vector<Var>> encode(const Var& images) const {
    Var x = patchify(images);
    std::vector<Var> attns;
    for (const auto& b : blocks_) {
      auto [a_out, attn] = self_attention(b.attn, b.ln1(x));
      x = nd::add(x, a_out);
      x = nd::add(x, b.fc2(nd::gelu(b.fc1(b.ln2(x)))));
      attns.push_back(std::move(attn));
    }
    return {x, std::move(attns)};
  }

  /// One attention layer plus a shared per-token MLP producing a logit per patch.
  /// Returns (logits [B, P], attention [B, heads, P, P]).
  std::pair<Var, Var> discriminate(const Var& embeddings) const {
    auto [a_out, attn] = self_attention(disc_attn_, disc_ln1_(embeddings));
    Var h = nd::add(embeddings, a_out);
    Var logit = disc_fc2_(nd::gelu(disc_fc1_(disc_ln2_(h))));
    const Shape& s = logit.shape();
    return {nd::reshape(logit, {s[0], s[1]}), attn};
  }

  Forward forward(const Var& images) const {
    Forward f;
    std::tie(f.embeddings, f.attentions) = encode(images);
    std::tie(f.logits, f.disc_attention) = discriminate(f.embeddings);
    f.scores = nd::sigmoid(f.logits);
    return f;
  }

  /// Attention tensor feeding the regularizer and the attention degree.
  const Var& reg_attention(const Forward& f) const {
    return cfg_.reg_layer == kDiscriminatorLayer ? f.disc_attention
                                                 : f.attentions.at(static_cast<std::size_t>(cfg_.reg_layer));
  }

  nd::Checkpoint to_checkpoint() const {
    nd::Checkpoint ck;
    for (const auto& p : params_) ck.tensors.emplace_back(p.name, p.var.value());
    for (const auto& [k, v] : to_kv(cfg_)) ck.meta["vit." + k] = v;
    return ck;
  }

  /// Copies weights from a checkpoint; names and shapes must all agree.
  void load_weights(const nd::Checkpoint& ck) {
    for (auto& p : params_) {
      const Array* a = ck.find(p.name);
      if (!a) throw nd::CheckpointError("checkpoint lacks tensor '" + p.name + "'");
      if (a->shape != p.var.shape())
        throw nd::CheckpointError("tensor '" + p.name + "' has shape " + nd::to_string(a->shape) +
                                  ", model expects " + nd::to_string(p.var.shape()));
    }
    for (auto& p : params_) p.var.mutable_value() = *ck.find(p.name);
  }

  static ViTConfig config_from_checkpoint(const nd::Checkpoint& ck) {
    std::map<std::string, std::string> kv;
    for (const auto& [k, v] : ck.meta)
      if (k.rfind("vit.", 0) == 0) kv[k.substr(4)] = v;
    return from_kv(kv);
  }

  static ViTDetector from_checkpoint(const nd::Checkpoint& ck) {
    ViTDetector m(config_from_checkpoint(ck));
    m.load_weights(ck);
    return m;
  }

 private:
  Var add_param(std::string name, Array value) {
    Var v = nd::parameter(std::move(value));
    params_.push_back({std::move(name), v});
    return v;
  }

  detail::Linear linear(Rng& rng, const std::string& name, std::size_t in, std::size_t out) {
    return {add_param(name + ".w", detail::xavier(rng, in, out)), add_param(name + ".b", Array({out}, 0.0))};
  }

  detail::Norm norm(const std::string& name, std::size_t d) {
    return {add_param(name + ".gain", Array({d}, 1.0)), add_param(name + ".bias", Array({d}, 0.0))};
  }

  detail::Attention attention(Rng& rng, const std::string& name, std::size_t d) {
    auto q = linear(rng, name + ".q", d, d);
    auto k = add_param(name + ".k.w", detail::xavier(rng, d, d));
    auto v = linear(rng, name + ".v", d, d);
    return {q, k, v, linear(rng, name + ".out", d, d)};
  }

  // x: [B, P, D] -> (output [B, P, D], attention [B, heads, P, P])
  std::pair<Var, Var> self_attention(const detail::Attention& a, const Var& x) const {
    const std::size_t B = x.shape()[0], P = x.shape()[1], D = x.shape()[2];
    const std::size_t H = cfg_.heads, dh = D / H;
    auto split = [&](const Var& t) { return nd::permute(nd::reshape(t, {B, P, H, dh}), {0, 2, 1, 3}); };
    Var q = split(a.q(x)), k = split(nd::matmul(x, a.k)), v = split(a.v(x));
    Var logits = nd::scale(nd::matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var attn = nd::softmax_rows(logits);
    Var o = nd::reshape(nd::permute(nd::matmul(attn, v), {0, 2, 1, 3}), {B, P, D});
    return {a.out(o), attn};
  }

  ViTConfig cfg_;
  nd::ParamList params_;
  detail::Linear embed_;
  Var pos_;
  std::vector<detail::Block> blocks_;
  detail::Norm disc_ln1_;
  detail::Attention disc_attn_;
  detail::Norm disc_ln2_;
  detail::Linear disc_fc1_, disc_fc2_;
};

// ---------------------------------------------------------------------------
// Labels, losses and attention statistics.

/// label(i, j) = 1 iff more than 5% of the patch's pixels are anomalous.
/// Returns a flat [grid * grid] array in row-major patch order.
inline Array patch_labels(const Mask& mask, std::size_t patch_size) {
  if (mask.shape.size() != 2 || mask.shape[0] != mask.shape[1] || patch_size == 0 ||
      mask.shape[0] % patch_size != 0)
    throw nd::ShapeError("patch_labels: mask " + nd::to_string(mask.shape) + " does not tile into " +
                         std::to_string(patch_size) + "px patches");
  for (double v : mask.data)
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("patch_labels: mask is not binary");
  const std::size_t n = mask.shape[0], g = n / patch_size;
  const std::size_t area = patch_size * patch_size;
  Array labels({g * g}, 0.0);
  for (std::size_t pi = 0; pi < g; ++pi)
    for (std::size_t pj = 0; pj < g; ++pj) {
      std::size_t count = 0;
      for (std::size_t y = 0; y < patch_size; ++y)
        for (std::size_t x = 0; x < patch_size; ++x)
          count += mask.data[(pi * patch_size + y) * n + pj * patch_size + x] == 1.0;
      // count / area > 0.05, in integers
      labels[pi * g + pj] = 100 * count > 5 * area ? 1.0 : 0.0;
    }
  return labels;
}

/// Summed binary cross-entropy over patches, from probabilities M in (0, 1).
inline Var loss_ce(const Var& scores, const Array& labels) {
  if (scores.shape() != labels.shape) throw nd::shape_error("loss_ce", scores.shape(), labels.shape);
  Array neg(labels.shape);
  for (std::size_t i = 0; i < labels.size(); ++i) neg[i] = 1.0 - labels[i];
  Var pos_term = nd::mul(nd::log(scores), nd::constant(labels));
  Var neg_term = nd::mul(nd::log(nd::add_scalar(nd::scale(scores, -1.0), 1.0)), nd::constant(neg));
  return nd::scale(nd::sum(nd::add(pos_term, neg_term)), -1.0);
}

/// Same quantity computed from logits: sum softplus(z) - y z.
inline Var loss_ce_logits(const Var& logits, const Array& labels) {
  if (logits.shape() != labels.shape) throw nd::shape_error("loss_ce_logits", logits.shape(), labels.shape);
  return nd::sub(nd::sum(nd::softplus(logits)), nd::sum(nd::mul(logits, nd::constant(labels))));
}

/// Sum over samples of 1 / (stabilizer + sum of coefficients <= delta). The
/// gate is held constant in the backward pass. A is [heads, P, P] or [B, heads, P, P].
inline Var regularizer(const Var& attention, double delta, double stabilizer = 1e-8) {
  const Shape& s = attention.shape();
  if (s.size() != 3 && s.size() != 4) throw nd::ShapeError("regularizer: attention shape " + nd::to_string(s));
  if (!(delta > 0.0)) throw std::invalid_argument("regularizer: delta must be positive");
  const std::size_t B = s.size() == 4 ? s[0] : 1;
  Array gate(s);
  for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = attention.value()[i] <= delta ? 1.0 : 0.0;
  Var gated = nd::mul(attention, nd::constant(std::move(gate)));
  Var per_sample = nd::sum_last(nd::reshape(gated, {B, attention.size() / B}));
  return nd::sum(nd::reciprocal(nd::add_scalar(per_sample, stabilizer)));
}

/// Per-sample mean over (head, query) of the number of keys with weight > delta.
inline std::vector<double> attention_degree_per_sample(const Array& attention, double delta) {
  const Shape& s = attention.shape;
  if (s.size() != 3 && s.size() != 4) throw nd::ShapeError("attention_degree: shape " + nd::to_string(s));
  const std::size_t B = s.size() == 4 ? s[0] : 1;
  const std::size_t keys = s.back();
  const std::size_t rows_per_sample = attention.size() / (B * keys);
  std::vector<double> out(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t count = 0;
    const double* p = attention.data.data() + b * rows_per_sample * keys;
    for (std::size_t i = 0; i < rows_per_sample * keys; ++i) count += p[i] > delta;
    out[b] = static_cast<double>(count) / static_cast<double>(rows_per_sample);
  }
  return out;
}

inline double attention_degree(const Array& attention, double delta) {
  auto per = attention_degree_per_sample(attention, delta);
  double s = 0.0;
  for (double v : per) s += v;
  return s / static_cast<double>(per.size());
}

/// Mean of the k largest patch scores; scores is [P] or [B, P].
inline Var image_score(const Var& scores, std::size_t k) { return nd::topk_mean_last(scores, k); }

inline double image_score(const Array& scores, std::size_t k) {
  return nd::topk_mean_last(nd::constant(scores), k).value()[0];
}

/// Bilinear upsampling of a flat [g * g] patch grid to image_size x image_size.
inline Array upsample_map(const Array& patch_scores, std::size_t image_size) {
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(patch_scores.size()))));
  if (g * g != patch_scores.size()) throw nd::ShapeError("upsample_map: not a square grid");
  Array grid({g, g}, patch_scores.data);
  Array up = nd::bilinear_resize(nd::constant(std::move(grid)), image_size, image_size).value();
  for (auto& v : up.data) v = std::clamp(v, 0.0, 1.0);
  return up;
}

/// Stacks HxWxC images into a [B, H, W, C] array.
inline Array stack(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("stack: empty batch");
  Shape s{images.size()};
  s.insert(s.end(), images[0].shape.begin(), images[0].shape.end());
  Array out(s);
  const std::size_t n = images[0].size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape != images[0].shape) throw nd::shape_error("stack", images[0].shape, images[i].shape);
    std::copy(images[i].data.begin(), images[i].data.end(), out.data.begin() + static_cast<long>(i * n));
  }
  return out;
}

/// Patch labels for a batch of masks: [B, P].
inline Array batch_labels(const std::vector<Mask>& masks, std::size_t patch_size) {
  std::vector<Array> rows;
  for (const auto& m : masks) rows.push_back(patch_labels(m, patch_size));
  return stack(rows);
}

/// L = CE + alpha * R for a batch, summed over samples.
inline Var total_loss(const ViTDetector& model, const Forward& f, const Array& labels) {
  Var ce = loss_ce_logits(f.logits, labels);
  const double alpha = model.config().reg_weight;
  if (alpha == 0.0) return ce;
  return nd::add(ce, nd::scale(regularizer(model.reg_attention(f), model.config().effective_delta()), alpha));
}

inline Var total_loss(const ViTDetector& model, const Var& images, const std::vector<Mask>& masks) {
  return total_loss(model, model.forward(images), batch_labels(masks, model.config().patch_size));
}

}  // namespace patchguard::vit
