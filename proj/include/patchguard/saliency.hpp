#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "patchguard/augment.hpp"
#include "patchguard/image.hpp"
#include "patchguard/nd/autodiff.hpp"
#include "patchguard/nd/checkpoint.hpp"
#include "patchguard/nd/optim.hpp"
#include "patchguard/rng.hpp"

namespace patchguard::saliency {

using nd::Array;
using nd::Var;

/// H x W map in [0, 1].
using SaliencyMap = nd::Array;

/// A classifier split at its Grad-CAM target layer.
class CamModel {
 public:
  virtual ~CamModel() = default;
  /// Target-layer activation for one image: [1, C, h, w].
  virtual Array features(const Image& x) const = 0;
  /// Class logits [1, classes] from a target-layer activation.
  virtual Var head(const Var& activation) const = 0;
  /// Trainable tensors; frozen while a map is computed.
  virtual nd::ParamList trainable() const { return {}; }
};

struct CamResult {
  SaliencyMap map;
  std::size_t class_index = 0;
  bool all_zero = false;
};

inline void max_normalize(SaliencyMap& m) {
  const double mx = *std::max_element(m.data.begin(), m.data.end());
  if (mx > 0.0)
    for (auto& v : m.data) v /= mx;
}

/// Grad-CAM. Channel weights are spatial means of d(score)/d(activation);
/// the map is relu(sum_c w_c A_c), bilinearly upsampled and max-normalized.
/// Without a class index the argmax class is explained.
inline CamResult gradcam(const CamModel& model, const Image& x, std::optional<std::size_t> class_index = {}) {
  check_image(x, "gradcam");
  Array feat = model.features(x);
  if (feat.rank() != 4 || feat.shape[0] != 1) throw nd::ShapeError("gradcam: features must be [1,C,h,w], got " + nd::to_string(feat.shape));
  const std::size_t C = feat.shape[1], h = feat.shape[2], w = feat.shape[3];
  nd::FrozenParams frozen(model.trainable());
  Var act = nd::leaf(feat, true);
  Var logits = model.head(act);
  const std::size_t classes = logits.size();
  CamResult res;
  if (class_index) {
    if (*class_index >= classes) throw std::out_of_range("gradcam: class index out of range");
    res.class_index = *class_index;
  } else {
    res.class_index = static_cast<std::size_t>(
        std::max_element(logits.value().data.begin(), logits.value().data.end()) - logits.value().data.begin());
  }
  Array pick({1, classes}, 0.0);
  pick[res.class_index] = 1.0;
  nd::backward(nd::sum(nd::mul(logits, nd::constant(pick))));
  Array grad = act.grad();

  Array cam({h, w}, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double wc = 0.0;
    for (std::size_t i = 0; i < h * w; ++i) wc += grad[c * h * w + i];
    wc /= static_cast<double>(h * w);
    for (std::size_t i = 0; i < h * w; ++i) cam[i] += wc * feat[c * h * w + i];
  }
  for (auto& v : cam.data) v = std::max(v, 0.0);
  res.map = nd::bilinear_resize(nd::constant(std::move(cam)), height(x), width(x)).value();
  res.all_zero = std::all_of(res.map.data.begin(), res.map.data.end(), [](double v) { return v == 0.0; });
  max_normalize(res.map);
  return res;
}

struct FusedResult {
  SaliencyMap map;
  std::vector<augment::TransformSpec> soft_specs;
  std::vector<SaliencyMap> views;  // Grad-CAM map of x, then of each soft view
  bool all_zero = false;
};

/// Elementwise product of equally sized maps, not renormalized.
inline SaliencyMap product_of(const std::vector<SaliencyMap>& maps) {
  if (maps.empty()) throw std::invalid_argument("product_of: no maps");
  SaliencyMap out = maps[0];
  for (std::size_t v = 1; v < maps.size(); ++v) {
    if (maps[v].shape != out.shape) throw nd::shape_error("product_of", out.shape, maps[v].shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= maps[v][i];
  }
  return out;
}

/// Elementwise product of Grad-CAM maps over x and k_soft soft-transformed
/// views of x, max-normalized.
inline FusedResult fused_saliency(const CamModel& model, const Image& x, std::size_t k_soft, Rng& rng) {
  FusedResult out;
  out.soft_specs = augment::sample_transforms(rng, k_soft, augment::Pool::Soft);
  out.views.push_back(gradcam(model, x).map);
  for (const auto& s : out.soft_specs) out.views.push_back(gradcam(model, augment::apply_soft(x, s)).map);
  out.map = product_of(out.views);
  out.all_zero = std::all_of(out.map.data.begin(), out.map.data.end(), [](double v) { return v == 0.0; });
  max_normalize(out.map);
  return out;
}

// ---------------------------------------------------------------------------
// Default backbone: four conv blocks, global average pooling, linear head.

class SmallCnn : public CamModel {
 public:
  static constexpr std::size_t kProxyClasses = 8;

  explicit SmallCnn(std::size_t in_channels = 3, std::uint64_t seed = 0, std::size_t classes = kProxyClasses) {
    Rng rng(seed);
    const std::size_t widths[] = {8, 16, 32, 32};
    std::size_t in = in_channels;
    for (std::size_t l = 0; l < 4; ++l) {
      const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));
      Array w({widths[l], in, 3, 3});
      for (auto& v : w.data) v = rng.uniform(-bound, bound);
      convs_.push_back({add("conv" + std::to_string(l) + ".w", std::move(w)),
                        add("conv" + std::to_string(l) + ".b", Array({widths[l]}, 0.0)), l == 0 ? 1u : 2u});
      in = widths[l];
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(in + classes));
    Array fw({in, classes});
    for (auto& v : fw.data) v = rng.uniform(-bound, bound);
    fc_w_ = add("fc.w", std::move(fw));
    fc_b_ = add("fc.b", Array({classes}, 0.0));
  }

  SmallCnn(const SmallCnn&) = delete;
  SmallCnn& operator=(const SmallCnn&) = delete;
  SmallCnn(SmallCnn&&) = default;
  SmallCnn& operator=(SmallCnn&&) = default;

  nd::ParamList trainable() const override { return params_; }
  nd::ParamList& parameters() { return params_; }
  const nd::ParamList& parameters() const { return params_; }

  /// [B, H, W, C] images -> target-layer activation [B, 32, H/8, W/8].
  Var trunk(const Var& images) const {
    Var x = nd::permute(images, {0, 3, 1, 2});
    for (const auto& c : convs_) x = nd::relu(nd::conv2d(x, c.w, c.b, {c.stride, 1}));
    return x;
  }

  Var head(const Var& activation) const override {
    const auto& s = activation.shape();
    Var pooled = nd::mean_last(nd::reshape(activation, {s[0], s[1], s[2] * s[3]}));
    return nd::add(nd::matmul(pooled, fc_w_), fc_b_);
  }

  Array features(const Image& x) const override {
    nd::FrozenParams frozen(params_);
    Array batch({1, height(x), width(x), channels(x)}, x.data);
    return trunk(nd::constant(std::move(batch))).value();
  }

  Var logits(const Var& images) const { return head(trunk(images)); }

  nd::Checkpoint to_checkpoint() const {
    nd::Checkpoint ck;
    for (const auto& p : params_) ck.tensors.emplace_back(p.name, p.var.value());
    return ck;
  }

  void load_weights(const nd::Checkpoint& ck) {
    for (auto& p : params_) {
      const Array* a = ck.find(p.name);
      if (!a || a->shape != p.var.shape()) throw nd::CheckpointError("backbone tensor '" + p.name + "' missing or misshapen");
    }
    for (auto& p : params_) p.var.mutable_value() = *ck.find(p.name);
  }

 private:
  struct Conv {
    Var w, b;
    std::size_t stride;
  };

  Var add(std::string name, Array a) {
    Var v = nd::parameter(std::move(a));
    params_.push_back({std::move(name), v});
    return v;
  }

  nd::ParamList params_;
  std::vector<Conv> convs_;
  Var fc_w_, fc_b_;
};

/// Proxy-task view i in [0, 8): 0-3 rotate by i quarter turns, 4-7 take the
/// corresponding 60% corner crop resized back to full extent.
inline Image proxy_view(const Image& x, std::size_t i) {
  const std::size_t H = height(x), W = width(x), C = channels(x);
  if (i < 4) {
    if (H != W) throw std::invalid_argument("proxy_view: rotations need square images");
    Image out(x.shape);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t c0 = 0; c0 < W; ++c0) {
        std::size_t sy = y, sx = c0;
        for (std::size_t r = 0; r < i; ++r) {
          const std::size_t ny = sx, nx = W - 1 - sy;
          sy = ny;
          sx = nx;
        }
        for (std::size_t c = 0; c < C; ++c) at(out, y, c0, c) = at(x, sy, sx, c);
      }
    return out;
  }
  const std::size_t ch = std::max<std::size_t>(1, H * 6 / 10), cw = std::max<std::size_t>(1, W * 6 / 10);
  const std::size_t corner = i - 4;
  const std::size_t y0 = (corner & 1) ? H - ch : 0, x0 = (corner & 2) ? W - cw : 0;
  return resize_bilinear(crop(x, y0, x0, ch, cw), H, W);
}

struct ProxyTrainOptions {
  std::size_t steps = 150;
  std::size_t batch = 8;
  double lr = 2e-3;
  std::uint64_t seed = 0;
};

/// Brief self-supervised training of the backbone: predict which proxy view
/// was applied to a normal image. Returns the final mean batch loss.
inline double train_proxy(SmallCnn& net, const std::vector<Image>& normals, const ProxyTrainOptions& opt) {
  if (normals.empty()) throw std::invalid_argument("train_proxy: no images");
  Rng rng(opt.seed);
  auto& params = net.parameters();
  auto state = nd::make_adamw_state(params, {.lr = opt.lr, .weight_decay = 1e-5});
  double last = 0.0;
  const Image& ref = normals.front();
  for (std::size_t step = 0; step < opt.steps; ++step) {
    Array batch({opt.batch, height(ref), width(ref), channels(ref)});
    Array onehot({opt.batch, SmallCnn::kProxyClasses}, 0.0);
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const auto& img = normals[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(normals.size()) - 1))];
      const auto cls = static_cast<std::size_t>(rng.uniform_int(0, SmallCnn::kProxyClasses - 1));
      Image v = proxy_view(img, cls);
      std::copy(v.data.begin(), v.data.end(), batch.data.begin() + static_cast<long>(b * v.size()));
      onehot[b * SmallCnn::kProxyClasses + cls] = 1.0;
    }
    Var probs = nd::softmax_rows(net.logits(nd::constant(std::move(batch))));
    Var loss = nd::scale(nd::sum(nd::mul(nd::log(nd::add_scalar(probs, 1e-12)), nd::constant(onehot))),
                         -1.0 / static_cast<double>(opt.batch));
    nd::zero_grad(params);
    nd::backward(loss);
    nd::adamw_step(params, state);
    last = loss.item();
  }
  nd::zero_grad(params);
  return last;
}

// ---------------------------------------------------------------------------
// Providers used by the pseudo-anomaly generator.

class SaliencyProvider {
 public:
  virtual ~SaliencyProvider() = default;
  virtual FusedResult saliency(const Image& x, Rng& rng) const = 0;
};

class GradCamProvider : public SaliencyProvider {
 public:
  GradCamProvider(std::shared_ptr<const CamModel> model, std::size_t k_soft)
      : model_(std::move(model)), k_soft_(k_soft) {}
  FusedResult saliency(const Image& x, Rng& rng) const override { return fused_saliency(*model_, x, k_soft_, rng); }
  std::size_t k_soft() const { return k_soft_; }

 private:
  std::shared_ptr<const CamModel> model_;
  std::size_t k_soft_;
};

/// Returns a fixed foreground map, or all-ones when none is given (texture
/// images, where every pixel is foreground).
class OracleProvider : public SaliencyProvider {
 public:
  OracleProvider() = default;
  explicit OracleProvider(SaliencyMap foreground) : fg_(std::move(foreground)) {}
  FusedResult saliency(const Image& x, Rng&) const override {
    FusedResult r;
    r.map = fg_.size() ? fg_ : SaliencyMap({height(x), width(x)}, 1.0);
    r.all_zero = std::all_of(r.map.data.begin(), r.map.data.end(), [](double v) { return v == 0.0; });
    return r;
  }

 private:
  SaliencyMap fg_;
};

}  // namespace patchguard::saliency
