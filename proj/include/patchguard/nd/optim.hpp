#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchguard/nd/autodiff.hpp"

namespace patchguard::nd {

struct NamedParam {
  std::string name;
  Var var;
};

using ParamList = std::vector<NamedParam>;

inline void zero_grad(ParamList& params) {
  for (auto& p : params) p.var.zero_grad();
}

/// Disables gradient accumulation into a parameter set for its lifetime.
class FrozenParams {
 public:
  explicit FrozenParams(ParamList params) : params_(std::move(params)) {
    for (auto& p : params_) {
      was_.push_back(p.var.requires_grad());
      p.var.set_requires_grad(false);
    }
  }
  ~FrozenParams() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].var.set_requires_grad(was_[i]);
  }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  ParamList params_;
  std::vector<bool> was_;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter '" + param + "'"), param_name(param) {}
  std::string param_name;
};

struct AdamWOptions {
  double lr = 0.0008;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

struct OptimState {
  AdamWOptions options;
  std::size_t step = 0;
  std::vector<Array> first_moment;
  std::vector<Array> second_moment;
};

inline OptimState make_adamw_state(const ParamList& params, AdamWOptions options = {}) {
  OptimState st;
  st.options = options;
  for (const auto& p : params) {
    st.first_moment.emplace_back(p.var.shape(), 0.0);
    st.second_moment.emplace_back(p.var.shape(), 0.0);
  }
  return st;
}

/// One AdamW update with decoupled weight decay and bias correction. Every
/// gradient is validated before any parameter is touched.
inline void adamw_step(ParamList& params, OptimState& st) {
  if (st.first_moment.size() != params.size())
    throw std::invalid_argument("adamw_step: optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (st.first_moment[i].shape != params[i].var.shape())
      throw shape_error("adamw_step '" + params[i].name + "'", st.first_moment[i].shape,
                        params[i].var.shape());
    if (params[i].var.has_grad() && !params[i].var.node()->grad.all_finite())
      throw NonFiniteGradient(params[i].name);
  }
  ++st.step;
  const auto& o = st.options;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Array& w = params[i].var.mutable_value();
    const bool has = params[i].var.has_grad();
    const Array* g = has ? &params[i].var.node()->grad : nullptr;
    Array& m = st.first_moment[i];
    Array& v = st.second_moment[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? (*g)[j] : 0.0;
      w[j] -= o.lr * o.weight_decay * w[j];
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * gj;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

/// Half-cosine annealing from lr0 down to lr0 * decay_factor at t_max.
inline double cosine_lr(double t, double lr0, double decay_factor, double t_max) {
  if (t_max <= 0.0) throw std::invalid_argument("cosine_lr: T_max must be positive");
  if (t < 0.0 || t > t_max)
    throw std::invalid_argument("cosine_lr: t=" + std::to_string(t) + " outside [0, T_max]");
  const double eta_min = lr0 * decay_factor;
  return eta_min + (lr0 - eta_min) * (1.0 + std::cos(std::numbers::pi * t / t_max)) / 2.0;
}

}  // namespace patchguard::nd
