#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "multistyle/error.hpp"

namespace multistyle {

using Vector = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  detail::require_dims(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double l1_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  return s;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Max-subtracted softmax; entries sum to 1 and never overflow.
inline Vector softmax(std::span<const double> logits) {
  detail::require(!logits.empty(), "softmax: empty logits");
  detail::require(all_finite(logits), "softmax: logits must be finite");
  const double m = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    s += out[i];
  }
  for (double& x : out) x /= s;
  return out;
}

inline Vector log_softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

inline Vector scaled(std::span<const double> v, double factor) {
  Vector out(v.begin(), v.end());
  for (double& x : out) x *= factor;
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Row-major dense matrix, used for small parameter blocks.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vector data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

// y = M x
inline Vector matvec(const Matrix& m, std::span<const double> x) {
  detail::require_dims(x.size() == m.cols, "matvec: dimension mismatch");
  Vector y(m.rows, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.data.data() + r * m.cols;
    double s = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

// y = M^T x
inline Vector matvec_transposed(const Matrix& m, std::span<const double> x) {
  detail::require_dims(x.size() == m.rows, "matvec_transposed: dimension mismatch");
  Vector y(m.cols, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.data.data() + r * m.cols;
    const double xr = x[r];
    if (xr == 0.0) continue;
    for (std::size_t c = 0; c < m.cols; ++c) y[c] += row[c] * xr;
  }
  return y;
}

// Adam with bias correction over a flat parameter vector.
struct Adam {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  Vector m;
  Vector v;
  long step_count = 0;

  void step(std::span<double> params, std::span<const double> grad) {
    detail::require_dims(params.size() == grad.size(), "Adam: gradient size mismatch");
    if (m.size() != params.size()) {
      m.assign(params.size(), 0.0);
      v.assign(params.size(), 0.0);
      step_count = 0;
    }
    ++step_count;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      if (m[i] == 0.0) continue;
      params[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon);
    }
  }
};

}  // namespace multistyle
