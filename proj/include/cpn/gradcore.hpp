#pragma once

// Dense double-precision primitives used by the prototype head, each paired
// with its hand-derived gradient. Callers compose the backward pass manually;
// there is no tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cpn/error.hpp"

namespace cpn {

/// Norms below this are treated as degenerate.
inline constexpr double kNormFloor = 1e-12;

namespace detail {
inline void require_finite(std::span<const double> xs, const char* what) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFinite, std::string(what) + " has a non-finite entry");
  }
}
inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw Error(ErrorCode::DimMismatch,
                std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b));
  }
}
}  // namespace detail

/// Real vector. Construction from caller-supplied values rejects NaN/Inf.
class Vec {
 public:
  Vec() = default;
  explicit Vec(std::size_t n) : xs_(n, 0.0) {}
  Vec(std::initializer_list<double> xs) : xs_(xs) { detail::require_finite(xs_, "Vec"); }
  explicit Vec(std::vector<double> xs) : xs_(std::move(xs)) { detail::require_finite(xs_, "Vec"); }
  explicit Vec(std::span<const double> xs) : xs_(xs.begin(), xs.end()) { detail::require_finite(xs_, "Vec"); }

  static Vec zeros(std::size_t n) { return Vec(n); }

  std::size_t size() const noexcept { return xs_.size(); }
  bool empty() const noexcept { return xs_.empty(); }
  double& operator[](std::size_t i) noexcept { return xs_[i]; }
  double operator[](std::size_t i) const noexcept { return xs_[i]; }
  double* data() noexcept { return xs_.data(); }
  const double* data() const noexcept { return xs_.data(); }
  auto begin() noexcept { return xs_.begin(); }
  auto end() noexcept { return xs_.end(); }
  auto begin() const noexcept { return xs_.begin(); }
  auto end() const noexcept { return xs_.end(); }

  std::span<double> span() noexcept { return xs_; }
  std::span<const double> span() const noexcept { return xs_; }
  operator std::span<const double>() const noexcept { return xs_; }  // NOLINT(google-explicit-constructor)

  const std::vector<double>& values() const noexcept { return xs_; }

  friend bool operator==(const Vec&, const Vec&) = default;

 private:
  std::vector<double> xs_;
};

/// Row-major real matrix.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), xs_(rows * cols, 0.0) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> xs) : rows_(rows), cols_(cols), xs_(std::move(xs)) {
    if (xs_.size() != rows_ * cols_) {
      throw Error(ErrorCode::DimMismatch, "Mat entry count " + std::to_string(xs_.size()) + " != " +
                                              std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    detail::require_finite(xs_, "Mat");
  }

  static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> xs;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      detail::require_same_size(r.size(), cols, "Mat::from_rows ragged row");
      xs.insert(xs.end(), r.begin(), r.end());
    }
    return Mat(rows.size(), cols, std::move(xs));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return xs_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return xs_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return xs_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {xs_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {xs_.data() + r * cols_, cols_}; }

  std::span<double> flat() noexcept { return xs_; }
  std::span<const double> flat() const noexcept { return xs_; }

  friend bool operator==(const Mat&, const Mat&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> xs_;
};

/// Value together with per-input gradients, in argument order.
template <class T>
struct GradResult {
  T value{};
  std::vector<Vec> grads;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  detail::require_same_size(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// out += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> out) {
  detail::require_same_size(x.size(), out.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) out[i] += alpha * x[i];
}

inline Vec scaled(std::span<const double> v, double alpha) {
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = alpha * v[i];
  return out;
}

inline Vec concat(std::span<const double> a, std::span<const double> b) {
  Vec out(a.size() + b.size());
  std::copy(a.begin(), a.end(), out.begin());
  std::copy(b.begin(), b.end(), out.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// ---------------------------------------------------------------------------
// l2 normalization

inline double checked_norm(std::span<const double> v, const char* what) {
  const double n = norm(v);
  if (!(n >= kNormFloor)) throw Error(ErrorCode::NearZeroNorm, std::string(what) + " norm " + std::to_string(n));
  return n;
}

inline Vec l2_normalize(std::span<const double> v) {
  return scaled(v, 1.0 / checked_norm(v, "l2_normalize"));
}

/// Vector-Jacobian product of l2_normalize at v: (I - v̂v̂ᵀ) u / ||v||.
/// The Jacobian is symmetric, so this is also the JVP.
inline Vec l2_normalize_vjp(std::span<const double> v, std::span<const double> upstream) {
  detail::require_same_size(v.size(), upstream.size(), "l2_normalize_vjp");
  const double n = checked_norm(v, "l2_normalize_vjp");
  const double proj = dot(v, upstream) / (n * n);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (upstream[i] - v[i] * proj) / n;
  return out;
}

inline Mat l2_normalize_jacobian(std::span<const double> v) {
  const double n = checked_norm(v, "l2_normalize_jacobian");
  Mat jac(v.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t k = 0; k < v.size(); ++k) {
      jac(i, k) = ((i == k ? 1.0 : 0.0) - (v[i] / n) * (v[k] / n)) / n;
    }
  }
  return jac;
}

inline Mat normalized_rows(const Mat& m) {
  Mat out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double n = checked_norm(m.row(r), "matrix row");
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(r, c) / n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// weighted sum of matrix rows

inline Vec weighted_sum(std::span<const double> z, const Mat& rows) {
  detail::require_same_size(z.size(), rows.rows(), "weighted_sum weights vs rows");
  Vec out(rows.cols());
  for (std::size_t j = 0; j < rows.rows(); ++j) {
    if (z[j] != 0.0) axpy(z[j], rows.row(j), out.span());
  }
  return out;
}

struct WeightedSumGrads {
  Vec dz;
  Mat drows;
};

inline WeightedSumGrads weighted_sum_vjp(std::span<const double> z, const Mat& rows, std::span<const double> upstream) {
  detail::require_same_size(z.size(), rows.rows(), "weighted_sum_vjp weights vs rows");
  detail::require_same_size(upstream.size(), rows.cols(), "weighted_sum_vjp upstream");
  WeightedSumGrads g{Vec(z.size()), Mat(rows.rows(), rows.cols())};
  for (std::size_t j = 0; j < rows.rows(); ++j) {
    g.dz[j] = dot(rows.row(j), upstream);
    axpy(z[j], upstream, g.drows.row(j));
  }
  return g;
}

// ---------------------------------------------------------------------------
// cosine similarity

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  detail::require_same_size(a.size(), b.size(), "cosine_sim");
  const double na = checked_norm(a, "cosine_sim lhs");
  const double nb = checked_norm(b, "cosine_sim rhs");
  return dot(a, b) / (na * nb);
}

/// grads = {d cos/d a, d cos/d b}
inline GradResult<double> cosine_sim_grad(std::span<const double> a, std::span<const double> b) {
  detail::require_same_size(a.size(), b.size(), "cosine_sim_grad");
  const double na = checked_norm(a, "cosine_sim lhs");
  const double nb = checked_norm(b, "cosine_sim rhs");
  const double c = dot(a, b) / (na * nb);
  Vec da(a.size()), db(b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    da[i] = b[i] / (na * nb) - c * a[i] / (na * na);
    db[i] = a[i] / (na * nb) - c * b[i] / (nb * nb);
  }
  GradResult<double> r{c, {}};
  r.grads.push_back(std::move(da));
  r.grads.push_back(std::move(db));
  return r;
}

// ---------------------------------------------------------------------------
// sigmoid

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double sigmoid_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s);
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy

inline Vec softmax(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorCode::DimMismatch, "softmax of empty logits");
  detail::require_finite(logits, "logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vec p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& x : p) x /= z;
  return p;
}

/// loss = -log softmax(logits)[target]; grads[0] = softmax - onehot.
inline GradResult<double> softmax_xent(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) {
    throw Error(ErrorCode::IndexOutOfRange,
                "target " + std::to_string(target) + " with " + std::to_string(logits.size()) + " logits");
  }
  detail::require_finite(logits, "logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double log_z = std::log(z);
  Vec g(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) g[i] = std::exp(logits[i] - mx - log_z);
  g[target] -= 1.0;
  GradResult<double> r{log_z - (logits[target] - mx), {}};
  r.grads.push_back(std::move(g));
  return r;
}

// ---------------------------------------------------------------------------
// finite-difference checking

/// Max over coordinates of |analytic - central FD| / max(1, |central FD|)
/// for a scalar function f: span<const double> -> double.
template <class F>
double grad_check(F&& f, std::span<const double> point, std::span<const double> analytic, double step = 1e-5) {
  detail::require_same_size(point.size(), analytic.size(), "grad_check");
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + step;
    const double fp = f(std::span<const double>(x));
    x[i] = x0 - step;
    const double fm = f(std::span<const double>(x));
    x[i] = x0;
    const double fd = (fp - fm) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

/// Same measure for a vector-valued f; jacobian is outputs x inputs.
template <class F>
double jacobian_check(F&& f, std::span<const double> point, const Mat& jacobian, double step = 1e-5) {
  detail::require_same_size(point.size(), jacobian.cols(), "jacobian_check inputs");
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + step;
    const Vec fp = f(std::span<const double>(x));
    x[i] = x0 - step;
    const Vec fm = f(std::span<const double>(x));
    x[i] = x0;
    detail::require_same_size(fp.size(), jacobian.rows(), "jacobian_check outputs");
    for (std::size_t o = 0; o < fp.size(); ++o) {
      const double fd = (fp[o] - fm[o]) / (2.0 * step);
      worst = std::max(worst, std::abs(jacobian(o, i) - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace cpn
