#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "patchguard/nd/autodiff.hpp"
#include "patchguard/nd/optim.hpp"

namespace patchguard::nd {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  // Coordinates where f was non-finite at x + h e_i or x - h e_i.
  std::vector<std::size_t> nonfinite;
  std::vector<double> analytic;
  std::vector<double> numeric;

  bool ok(double tol) const { return nonfinite.empty() && max_rel_error < tol; }
};

/// Compares the reverse-mode gradient of a scalar f at x against central
/// differences. Error per coordinate is |analytic - numeric| / (|numeric| + 1e-8).
inline GradCheckReport finite_diff_check(const std::function<Var(const Var&)>& f, const Array& x,
                                         double h = 1e-5) {
  GradCheckReport rep;
  Var xv = leaf(x, true);
  Var y = f(xv);
  backward(y);
  rep.analytic = xv.grad().data;
  rep.numeric.resize(x.size());

  Array probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(constant(probe)).item();
    probe[i] = orig - h;
    const double fm = f(constant(probe)).item();
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.nonfinite.push_back(i);
      rep.numeric[i] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const double num = (fp - fm) / (2.0 * h);
    rep.numeric[i] = num;
    const double err = std::abs(rep.analytic[i] - num) / (std::abs(num) + 1e-8);
    if (err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_index = i;
    }
  }
  return rep;
}

/// Same check against every coordinate of a parameter list; loss is rebuilt
/// from scratch for each probe. Parameter values are restored afterwards.
inline GradCheckReport finite_diff_check_params(const std::function<Var()>& loss, ParamList& params,
                                                double h = 1e-5) {
  GradCheckReport rep;
  zero_grad(params);
  backward(loss());
  for (auto& p : params) {
    Array g = p.var.grad();
    rep.analytic.insert(rep.analytic.end(), g.data.begin(), g.data.end());
  }
  rep.numeric.resize(rep.analytic.size());
  std::size_t flat = 0;
  for (auto& p : params) {
    Array& w = p.var.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i, ++flat) {
      const double orig = w[i];
      w[i] = orig + h;
      const double fp = loss().item();
      w[i] = orig - h;
      const double fm = loss().item();
      w[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        rep.nonfinite.push_back(flat);
        rep.numeric[flat] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      const double num = (fp - fm) / (2.0 * h);
      rep.numeric[flat] = num;
      const double err = std::abs(rep.analytic[flat] - num) / (std::abs(num) + 1e-8);
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_index = flat;
      }
    }
  }
  zero_grad(params);
  return rep;
}

}  // namespace patchguard::nd
