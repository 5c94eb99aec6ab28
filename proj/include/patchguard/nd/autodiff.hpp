#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "patchguard/nd/array.hpp"

namespace patchguard::nd {

struct Node {
  Array value;
  Array grad;  // empty until something flows into it
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into parents that require grad.
  std::function<void(Node& self)> backward_fn;

  Array& grad_buffer() {
    if (grad.data.size() != value.data.size()) grad = Array(value.shape, 0.0);
    return grad;
  }
};

/// Handle to a node in the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Array& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const std::string& op() const { return node_->op; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Gradient after backward(); zeros if nothing flowed here.
  Array grad() const { return has_grad() ? node_->grad : Array(shape(), 0.0); }
  void zero_grad() { node_->grad = Array(); }

  // Only optimizers and attacks mutate leaf values in place.
  Array& mutable_value() { return node_->value; }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var leaf(Array value, bool requires_grad, std::string op = "leaf") {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->op = std::move(op);
  return Var(std::move(n));
}

inline Var constant(Array value) { return leaf(std::move(value), false, "const"); }
inline Var parameter(Array value) { return leaf(std::move(value), true, "param"); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline Var make_node(Array value, std::vector<Var> inputs, std::string op,
                     std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = std::move(op);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  n->requires_grad = any;
  if (any) {
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.ptr());
    n->backward_fn = std::move(backward);
  }
  return Var(std::move(n));
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
inline Array& pgrad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<long>(small.size()));
}

// Broadcast rule: identical shapes, or one shape is a trailing suffix of the other.
inline Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw shape_error(op, a, b);
}

template <class F, class DF>
Var unary(const Var& x, std::string op, F f, DF df) {
  const Array& xv = x.value();
  Array out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_node(std::move(out), {x}, std::move(op), [df](Node& self) {
    const Array& xv = self.parents[0]->value;
    Array& gx = pgrad(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i)
      gx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with trailing-suffix broadcasting.

inline Var add(const Var& a, const Var& b) {
  using namespace detail;
  Shape s = broadcast_shape("add", a.shape(), b.shape());
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out(s);
  const std::size_t na = av.size(), nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i % na] + bv[i % nb];
  return make_node(std::move(out), {a, b}, "add", [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      Array& g = pgrad(self, p);
      const std::size_t n = g.size();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  using namespace detail;
  Shape s = broadcast_shape("sub", a.shape(), b.shape());
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out(s);
  const std::size_t na = av.size(), nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i % na] - bv[i % nb];
  return make_node(std::move(out), {a, b}, "sub", [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      Array& g = pgrad(self, p);
      const std::size_t n = g.size();
      const double sign = p == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += sign * self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  using namespace detail;
  Shape s = broadcast_shape("mul", a.shape(), b.shape());
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out(s);
  const std::size_t na = av.size(), nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i % na] * bv[i % nb];
  return make_node(std::move(out), {a, b}, "mul", [](Node& self) {
    const Array& av = self.parents[0]->value;
    const Array& bv = self.parents[1]->value;
    const std::size_t na = av.size(), nb = bv.size();
    if (wants(self, 0)) {
      Array& g = pgrad(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % na] += self.grad[i] * bv[i % nb];
    }
    if (wants(self, 1)) {
      Array& g = pgrad(self, 1);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % nb] += self.grad[i] * av[i % na];
    }
  });
}

inline Var scale(const Var& x, double c) {
  return detail::unary(
      x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& x, double c) {
  return detail::unary(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }
inline Var operator*(const Var& x, double c) { return scale(x, c); }
inline Var operator+(const Var& x, double c) { return add_scalar(x, c); }

// ---------------------------------------------------------------------------
// Pointwise nonlinearities.

inline Var relu(const Var& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Exact GELU, x * Phi(x).
inline Var gelu(const Var& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x, "sigmoid", [](double v) { return sigmoid_scalar(v); },
      [](double, double y) { return y * (1.0 - y); });
}

/// log(1 + exp(x)), stable for large |x|.
inline Var softplus(const Var& x) {
  return detail::unary(
      x, "softplus",
      [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return sigmoid_scalar(v); });
}

inline Var log(const Var& x) {
  return detail::unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var exp(const Var& x) {
  return detail::unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var reciprocal(const Var& x) {
  return detail::unary(
      x, "reciprocal", [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

inline Var square(const Var& x) {
  return detail::unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

inline Var reshape(const Var& x, Shape s) {
  if (numel(s) != x.size()) throw shape_error("reshape", x.shape(), s);
  Array out(std::move(s), x.value().data);
  return detail::make_node(std::move(out), {x}, "reshape", [](Node& self) {
    Array& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {

inline Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Index map: out flat index -> input flat index, for a permutation of axes.
inline std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& axes) {
  const std::size_t r = in.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[axes[i]];
  const Shape in_st = strides_of(in);
  Shape src_st(r);
  for (std::size_t i = 0; i < r; ++i) src_st[i] = in_st[axes[i]];
  std::vector<std::size_t> idx(numel(in));
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < idx.size(); ++o) {
    idx[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      src += src_st[d];
      if (counter[d] < out_shape[d]) break;
      src -= src_st[d] * out_shape[d];
      counter[d] = 0;
    }
  }
  return idx;
}

}  // namespace detail

inline Var permute(const Var& x, std::vector<std::size_t> axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) throw shape_error("permute", in, Shape(axes.begin(), axes.end()));
  std::vector<bool> seen(in.size(), false);
  for (auto a : axes) {
    if (a >= in.size() || seen[a]) throw shape_error("permute", in, Shape(axes.begin(), axes.end()));
    seen[a] = true;
  }
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out_shape[i] = in[axes[i]];
  auto idx = std::make_shared<std::vector<std::size_t>>(detail::permute_index(in, axes));
  Array out(out_shape);
  const Array& xv = x.value();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[(*idx)[o]];
  return detail::make_node(std::move(out), {x}, "permute", [idx](Node& self) {
    Array& g = detail::pgrad(self, 0);
    for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*idx)[o]] += self.grad[o];
  });
}

/// Swaps the last two axes.
inline Var transpose(const Var& x) {
  const std::size_t r = x.shape().size();
  if (r < 2) throw ShapeError("transpose: need rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

// ---------------------------------------------------------------------------
// Reductions. Accumulation is always in double.

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return detail::make_node(Array::scalar(s), {x}, "sum", [](Node& self) {
    Array& g = detail::pgrad(self, 0);
    const double go = self.grad[0];
    for (auto& v : g.data) v += go;
  });
}

inline Var mean(const Var& x) {
  if (x.size() == 0) throw ShapeError("mean: empty array");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sum over the last axis; drops it.
inline Var sum_last(const Var& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("sum_last: scalar input");
  const std::size_t n = s.back();
  Shape os(s.begin(), s.end() - 1);
  Array out(os);
  const Array& xv = x.value();
  for (std::size_t r = 0; r < out.size(); ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += xv[r * n + j];
    out[r] = acc;
  }
  return detail::make_node(std::move(out), {x}, "sum_last", [n](Node& self) {
    Array& g = detail::pgrad(self, 0);
    for (std::size_t r = 0; r < self.grad.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r];
  });
}

inline Var mean_last(const Var& x) {
  if (x.shape().empty() || x.shape().back() == 0) throw ShapeError("mean_last: empty axis");
  return scale(sum_last(x), 1.0 / static_cast<double>(x.shape().back()));
}

/// Mean of the k largest entries along the last axis; drops it.
inline Var topk_mean_last(const Var& x, std::size_t k) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("topk_mean_last: scalar input");
  const std::size_t n = s.back();
  if (k < 1 || k > n)
    throw std::invalid_argument("topk_mean_last: k=" + std::to_string(k) + " outside [1," +
                                std::to_string(n) + "]");
  Shape os(s.begin(), s.end() - 1);
  Array out(os);
  const Array& xv = x.value();
  auto picked = std::make_shared<std::vector<std::size_t>>();
  picked->reserve(out.size() * k);
  std::vector<std::size_t> order(n);
  for (std::size_t r = 0; r < out.size(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    const double* row = xv.data.data() + r * n;
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                      [row](std::size_t a, std::size_t b) {
                        return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      acc += row[order[j]];
      picked->push_back(r * n + order[j]);
    }
    out[r] = acc / static_cast<double>(k);
  }
  return detail::make_node(std::move(out), {x}, "topk_mean", [picked, k](Node& self) {
    Array& g = detail::pgrad(self, 0);
    const double inv = 1.0 / static_cast<double>(k);
    for (std::size_t r = 0; r < self.grad.size(); ++r)
      for (std::size_t j = 0; j < k; ++j) g[(*picked)[r * k + j]] += self.grad[r] * inv;
  });
}

// ---------------------------------------------------------------------------
// Softmax and layer norm over the last axis.

inline Var softmax_rows(const Var& x) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0)
    throw ShapeError("softmax_rows: empty softmax axis in shape " + to_string(s));
  const std::size_t n = s.back();
  const std::size_t rows = x.size() / n;
  const Array& xv = x.value();
  Array out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data.data() + r * n;
    double* o = out.data.data() + r * n;
    double m = in[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - m));
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return detail::make_node(std::move(out), {x}, "softmax_rows", [n, rows](Node& self) {
    Array& g = detail::pgrad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data.data() + r * n;
      const double* go = self.grad.data.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += go[j] * y[j];
      double* gi = g.data.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) gi[j] += y[j] * (go[j] - dot);
    }
  });
}

/// Layer norm over the last axis with affine gain and bias of shape [D].
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = s.back();
  if (gain.shape() != Shape{d}) throw shape_error("layer_norm gain", s, gain.shape());
  if (bias.shape() != Shape{d}) throw shape_error("layer_norm bias", s, bias.shape());
  const std::size_t rows = x.size() / d;
  const Array& xv = x.value();
  auto xhat = std::make_shared<Array>(s);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Array out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gain.value()[j] + bias.value()[j];
    }
  }
  return detail::make_node(
      std::move(out), {x, gain, bias}, "layer_norm", [xhat, inv_std, d, rows](Node& self) {
        const Array& gv = self.parents[1]->value;
        if (detail::wants(self, 1)) {
          Array& gg = detail::pgrad(self, 1);
          for (std::size_t i = 0; i < self.grad.size(); ++i) gg[i % d] += self.grad[i] * (*xhat)[i];
        }
        if (detail::wants(self, 2)) {
          Array& gb = detail::pgrad(self, 2);
          for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % d] += self.grad[i];
        }
        if (detail::wants(self, 0)) {
          Array& gx = detail::pgrad(self, 0);
          const double invd = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = self.grad[r * d + j] * gv[j];
              m1 += dh;
              m2 += dh * (*xhat)[r * d + j];
            }
            m1 *= invd;
            m2 *= invd;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = self.grad[r * d + j] * gv[j];
              gx[r * d + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix products.

namespace detail {

// C[b] (+)= op(A[b]) * op(B[b]) for each batch entry; strides of zero broadcast.
inline void gemm_batched(std::size_t batch, const double* a, std::size_t a_stride, bool ta,
                         std::size_t a_rows, std::size_t a_cols, const double* b,
                         std::size_t b_stride, bool tb, std::size_t b_rows, std::size_t b_cols,
                         double* c, std::size_t c_stride, bool accumulate) {
  for (std::size_t i = 0; i < batch; ++i) {
    CMapMat A(a + i * a_stride, static_cast<long>(a_rows), static_cast<long>(a_cols));
    CMapMat B(b + i * b_stride, static_cast<long>(b_rows), static_cast<long>(b_cols));
    const long m = static_cast<long>(ta ? a_cols : a_rows);
    const long n = static_cast<long>(tb ? b_rows : b_cols);
    MapMat C(c + i * c_stride, m, n);
    if (!accumulate) C.setZero();
    if (!ta && !tb) C.noalias() += A * B;
    else if (!ta && tb) C.noalias() += A * B.transpose();
    else if (ta && !tb) C.noalias() += A.transpose() * B;
    else C.noalias() += A.transpose() * B.transpose();
  }
}

}  // namespace detail

/// a: [..., m, k]. b: [k, n] (shared across the batch) or [..., k, n] with the
/// same leading extents as a. With transpose_b, b is read as its last-two-axes
/// transpose, i.e. b: [n, k] or [..., n, k].
inline Var matmul(const Var& a, const Var& b, bool transpose_b = false) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) throw shape_error("matmul", as, bs);
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t bk = transpose_b ? bs.back() : bs[bs.size() - 2];
  const std::size_t n = transpose_b ? bs[bs.size() - 2] : bs.back();
  if (bk != k) throw shape_error("matmul", as, bs);
  const bool shared_b = bs.size() == 2;
  if (!shared_b && !std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2))
    throw shape_error("matmul", as, bs);
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  Shape os(as.begin(), as.end() - 1);
  os.push_back(n);
  Array out(os);
  const std::size_t br = bs[bs.size() - 2], bc = bs.back();
  if (shared_b) {
    // Fold the batch into rows for one large product.
    detail::gemm_batched(1, a.value().data.data(), 0, false, batch * m, k, b.value().data.data(), 0,
                         transpose_b, br, bc, out.data.data(), 0, false);
  } else {
    detail::gemm_batched(batch, a.value().data.data(), m * k, false, m, k, b.value().data.data(),
                         br * bc, transpose_b, br, bc, out.data.data(), m * n, false);
  }
  return detail::make_node(
      std::move(out), {a, b}, "matmul",
      [batch, m, k, n, br, bc, shared_b, transpose_b](Node& self) {
        const double* av = self.parents[0]->value.data.data();
        const double* bv = self.parents[1]->value.data.data();
        const double* g = self.grad.data.data();
        if (detail::wants(self, 0)) {
          // dA = G * op(B)^T
          double* ga = detail::pgrad(self, 0).data.data();
          if (shared_b)
            detail::gemm_batched(1, g, 0, false, batch * m, n, bv, 0, !transpose_b, br, bc, ga, 0,
                                 true);
          else
            detail::gemm_batched(batch, g, m * n, false, m, n, bv, br * bc, !transpose_b, br, bc,
                                 ga, m * k, true);
        }
        if (detail::wants(self, 1)) {
          double* gb = detail::pgrad(self, 1).data.data();
          // dB = A^T G, or (A^T G)^T = G^T A when B is stored transposed.
          if (shared_b) {
            if (!transpose_b)
              detail::gemm_batched(1, av, 0, true, batch * m, k, g, 0, false, batch * m, n, gb, 0,
                                   true);
            else
              detail::gemm_batched(1, g, 0, true, batch * m, n, av, 0, false, batch * m, k, gb, 0,
                                   true);
          } else {
            if (!transpose_b)
              detail::gemm_batched(batch, av, m * k, true, m, k, g, m * n, false, m, n, gb, k * n,
                                   true);
            else
              detail::gemm_batched(batch, g, m * n, true, m, n, av, m * k, false, m, k, gb, n * k,
                                   true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and resampling on NCHW layouts.

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

inline void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh,
                   std::size_t ow, double* col) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = col + ((ci * kh + ki) * kw + kj) * oh * ow;
        for (std::size_t oi = 0; oi < oh; ++oi) {
          const long yi = static_cast<long>(oi * stride + ki) - static_cast<long>(pad);
          for (std::size_t oj = 0; oj < ow; ++oj) {
            const long xj = static_cast<long>(oj * stride + kj) - static_cast<long>(pad);
            row[oi * ow + oj] = (yi >= 0 && yi < static_cast<long>(h) && xj >= 0 &&
                                 xj < static_cast<long>(w))
                                    ? x[(ci * h + static_cast<std::size_t>(yi)) * w +
                                        static_cast<std::size_t>(xj)]
                                    : 0.0;
          }
        }
      }
}

inline void col2im(const double* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh,
                   std::size_t ow, double* x) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* row = col + ((ci * kh + ki) * kw + kj) * oh * ow;
        for (std::size_t oi = 0; oi < oh; ++oi) {
          const long yi = static_cast<long>(oi * stride + ki) - static_cast<long>(pad);
          if (yi < 0 || yi >= static_cast<long>(h)) continue;
          for (std::size_t oj = 0; oj < ow; ++oj) {
            const long xj = static_cast<long>(oj * stride + kj) - static_cast<long>(pad);
            if (xj < 0 || xj >= static_cast<long>(w)) continue;
            x[(ci * h + static_cast<std::size_t>(yi)) * w + static_cast<std::size_t>(xj)] +=
                row[oi * ow + oj];
          }
        }
      }
}

}  // namespace detail

/// x: [B, C, H, W], weight: [O, C, kh, kw], bias: [O].
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions opt = {}) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1]) throw shape_error("conv2d", xs, ws);
  if (bias.shape() != Shape{ws[0]}) throw shape_error("conv2d bias", ws, bias.shape());
  if (opt.stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t O = ws[0], KH = ws[2], KW = ws[3];
  if (H + 2 * opt.padding < KH || W + 2 * opt.padding < KW) throw shape_error("conv2d", xs, ws);
  const std::size_t OH = (H + 2 * opt.padding - KH) / opt.stride + 1;
  const std::size_t OW = (W + 2 * opt.padding - KW) / opt.stride + 1;
  const std::size_t ck = C * KH * KW, hw = OH * OW;
  Array out(Shape{B, O, OH, OW});
  std::vector<double> col(ck * hw);
  for (std::size_t b = 0; b < B; ++b) {
    detail::im2col(x.value().data.data() + b * C * H * W, C, H, W, KH, KW, opt.stride, opt.padding,
                   OH, OW, col.data());
    double* ob = out.data.data() + b * O * hw;
    detail::gemm_batched(1, weight.value().data.data(), 0, false, O, ck, col.data(), 0, false, ck,
                         hw, ob, 0, false);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < hw; ++i) ob[o * hw + i] += bias.value()[o];
  }
  return detail::make_node(
      std::move(out), {x, weight, bias}, "conv2d",
      [=](Node& self) {
        const double* xv = self.parents[0]->value.data.data();
        const double* wv = self.parents[1]->value.data.data();
        std::vector<double> col(ck * hw), dcol(ck * hw);
        for (std::size_t b = 0; b < B; ++b) {
          const double* gb = self.grad.data.data() + b * O * hw;
          if (detail::wants(self, 2)) {
            Array& gbias = detail::pgrad(self, 2);
            for (std::size_t o = 0; o < O; ++o)
              for (std::size_t i = 0; i < hw; ++i) gbias[o] += gb[o * hw + i];
          }
          if (detail::wants(self, 1)) {
            detail::im2col(xv + b * C * H * W, C, H, W, KH, KW, opt.stride, opt.padding, OH, OW,
                           col.data());
            detail::gemm_batched(1, gb, 0, false, O, hw, col.data(), 0, true, ck, hw,
                                 detail::pgrad(self, 1).data.data(), 0, true);
          }
          if (detail::wants(self, 0)) {
            detail::gemm_batched(1, wv, 0, true, O, ck, gb, 0, false, O, hw, dcol.data(), 0, false);
            detail::col2im(dcol.data(), C, H, W, KH, KW, opt.stride, opt.padding, OH, OW,
                           detail::pgrad(self, 0).data.data() + b * C * H * W);
          }
        }
      });
}

namespace detail {

struct Tap {
  std::size_t lo, hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

// Corner-aligned sampling: output index i maps to input i * (in - 1) / (out - 1).
inline std::vector<Tap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    if (in == 1 || out == 1) {
      taps[i] = {0, 0, 0.0};
      continue;
    }
    const std::size_t num = i * (in - 1);
    const std::size_t den = out - 1;
    const std::size_t lo = num / den;
    const std::size_t rem = num % den;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, static_cast<double>(rem) / static_cast<double>(den)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of the last two axes, corner-aligned.
inline Var bilinear_resize(const Var& x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("bilinear_resize: need rank >= 2, got " + to_string(s));
  if (out_h == 0 || out_w == 0)
    throw ShapeError("bilinear_resize: zero output extent for input " + to_string(s));
  const std::size_t H = s[s.size() - 2], W = s.back();
  const std::size_t planes = x.size() / (H * W);
  auto ty = std::make_shared<std::vector<detail::Tap>>(detail::resize_taps(H, out_h));
  auto tx = std::make_shared<std::vector<detail::Tap>>(detail::resize_taps(W, out_w));
  Shape os(s.begin(), s.end() - 2);
  os.push_back(out_h);
  os.push_back(out_w);
  Array out(os);
  const Array& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = xv.data.data() + p * H * W;
    double* o = out.data.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& a = (*ty)[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& b = (*tx)[j];
        const double top = in[a.lo * W + b.lo] * (1.0 - b.w_hi) + in[a.lo * W + b.hi] * b.w_hi;
        const double bot = in[a.hi * W + b.lo] * (1.0 - b.w_hi) + in[a.hi * W + b.hi] * b.w_hi;
        o[i * out_w + j] = top * (1.0 - a.w_hi) + bot * a.w_hi;
      }
    }
  }
  return detail::make_node(std::move(out), {x}, "bilinear_resize",
                           [ty, tx, planes, H, W, out_h, out_w](Node& self) {
                             Array& g = detail::pgrad(self, 0);
                             for (std::size_t p = 0; p < planes; ++p) {
                               double* gi = g.data.data() + p * H * W;
                               const double* go = self.grad.data.data() + p * out_h * out_w;
                               for (std::size_t i = 0; i < out_h; ++i) {
                                 const auto& a = (*ty)[i];
                                 for (std::size_t j = 0; j < out_w; ++j) {
                                   const auto& b = (*tx)[j];
                                   const double v = go[i * out_w + j];
                                   gi[a.lo * W + b.lo] += v * (1.0 - a.w_hi) * (1.0 - b.w_hi);
                                   gi[a.lo * W + b.hi] += v * (1.0 - a.w_hi) * b.w_hi;
                                   gi[a.hi * W + b.lo] += v * a.w_hi * (1.0 - b.w_hi);
                                   gi[a.hi * W + b.hi] += v * a.w_hi * b.w_hi;
                                 }
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Reverse pass.

/// Accumulates d(loss)/d(node) into every node that requires grad. Leaves keep
/// accumulating across calls until zero_grad().
inline void backward(const Var& loss) {
  if (!loss) throw std::invalid_argument("backward: null loss");
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

}  // namespace patchguard::nd
