#pragma once

#include <cmath>
#include <limits>
#include <cstddef>
#include <functional>
#include <vector>

#include "fedpdpo/errors.hpp"
#include "fedpdpo/matrix.hpp"
#include "fedpdpo/rng.hpp"

namespace fedpdpo {

inline void require_finite(double x, const char* who) {
  if (!std::isfinite(x)) throw DomainError(std::string(who) + ": non-finite input");
}

// Logistic sigmoid, branch-stable on both tails. The result is pinned to
// the open interval (0, 1): on far tails where the quotient rounds to an
// endpoint it is nudged by one representable step.
inline double sigmoid(double x) {
  require_finite(x, "sigmoid");
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    s = e / (1.0 + e);
  }
  if (s >= 1.0) s = std::nextafter(1.0, 0.0);
  if (s <= 0.0) s = std::numeric_limits<double>::denorm_min();
  return s;
}

// log(sigmoid(x)) = -log1p(exp(-x)) for x >= 0, x - log1p(exp(x)) otherwise.
inline double log_sigmoid(double x) {
  require_finite(x, "log_sigmoid");
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

// Tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline double gelu(double x) {
  require_finite(x, "gelu");
  constexpr double kSqrt2OverPi = 0.7978845608028653558798921198687;
  constexpr double kCubic = 0.044715;
  const double u = kSqrt2OverPi * (x + kCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_derivative(double x) {
  constexpr double kSqrt2OverPi = 0.7978845608028653558798921198687;
  constexpr double kCubic = 0.044715;
  const double u = kSqrt2OverPi * (x + kCubic * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline double stable_tanh(double x) {
  require_finite(x, "tanh");
  return std::tanh(x);
}

// Row-wise log-softmax with max subtraction.
inline Vector log_softmax(const Vector& row) {
  if (row.empty()) throw DomainError("log_softmax: empty row");
  double mx = row[0];
  for (double v : row) {
    require_finite(v, "log_softmax");
    if (v > mx) mx = v;
  }
  double sum = 0.0;
  for (double v : row) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  Vector out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lse;
  return out;
}

// gamma * (z - mean) / sqrt(var + eps) + beta, population variance.
inline Vector layer_norm(const Vector& z, const Vector& gamma, const Vector& beta,
                         double eps) {
  if (z.size() != gamma.size() || z.size() != beta.size())
    throw ContractError("layer_norm: dim mismatch");
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  if (z.empty()) throw ContractError("layer_norm: empty input");
  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= static_cast<double>(z.size());
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  var /= static_cast<double>(z.size());
  const double rstd = 1.0 / std::sqrt(var + eps);
  Vector out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    out[i] = gamma[i] * (z[i] - mean) * rstd + beta[i];
  return out;
}

// Gumbel(mu, 1) draw via inverse CDF; the uniform is clamped away from
// {0, 1} by 1e-15 so the double logarithm stays finite.
inline double sample_gumbel(SeededRng& rng, double mu) {
  double u = rng.next_uniform();
  if (u < 1e-15) u = 1e-15;
  if (u > 1.0 - 1e-15) u = 1.0 - 1e-15;
  return mu - std::log(-std::log(u));
}

// Inverted dropout mask: zero with probability p, 1/(1-p) otherwise.
// Evaluation mode is the identity (all ones).
inline Vector dropout_mask(SeededRng& rng, std::size_t len, double p, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout_mask: p must be in [0, 1)");
  Vector mask(len, 1.0);
  if (!training || p == 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < len; ++i) {
    mask[i] = rng.next_uniform() < p ? 0.0 : keep_scale;
  }
  return mask;
}

// Central-difference gradient oracle used to check every hand-derived
// backward pass: (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
inline Vector finite_diff_grad(const std::function<double(const Vector&)>& f,
                               const Vector& theta, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: h must be positive");
  Vector grad(theta.size());
  Vector probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double fp = f(probe);
    probe[i] = theta[i] - h;
    const double fm = f(probe);
    probe[i] = theta[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw OracleError("finite_diff_grad: non-finite function value");
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace fedpdpo
