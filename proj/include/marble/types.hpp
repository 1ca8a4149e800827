// SPDX-License-Identifier: Apache-2.0
//
// Shared vocabulary: gradient vectors, simplex weights, error types and the
// handful of dense vector kernels every other module leans on.
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace marble {

/// Flat parameter-space vector (per-reward gradient, update direction, ...).
using GradientVector = std::vector<double>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

#define MARBLE_DEFINE_ERROR(Name)          \
  class Name : public Error {              \
  public:                                  \
    using Error::Error;                    \
  };

MARBLE_DEFINE_ERROR(DimensionError)
MARBLE_DEFINE_ERROR(EmptyInputError)
MARBLE_DEFINE_ERROR(NumericError)
MARBLE_DEFINE_ERROR(ParameterError)
MARBLE_DEFINE_ERROR(IllConditionedError)
MARBLE_DEFINE_ERROR(LookupError)
MARBLE_DEFINE_ERROR(IoError)
MARBLE_DEFINE_ERROR(ConfigError)
MARBLE_DEFINE_ERROR(ShardError)
MARBLE_DEFINE_ERROR(SyncViolationError)
MARBLE_DEFINE_ERROR(NoSignalError)
MARBLE_DEFINE_ERROR(DivergenceError)

#undef MARBLE_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

namespace vec {

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": size mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  require_same_size(x.size(), y.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline GradientVector scaled(std::span<const double> x, double a) {
  GradientVector out(x.begin(), x.end());
  for (auto& v : out) v *= a;
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool all_finite(std::span<const double> a) {
  for (double v : a)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace vec

// ---------------------------------------------------------------------------
// SimplexWeights
// ---------------------------------------------------------------------------

/// A point on the probability simplex: nonnegative entries summing to one.
/// Construction validates; the only way to obtain one is through a checked
/// factory, so holders never need to re-check.
class SimplexWeights {
public:
  static constexpr double kSumTolerance = 1e-12;

  SimplexWeights() = default;

  static SimplexWeights from(std::vector<double> alpha) {
    if (alpha.empty()) throw EmptyInputError("SimplexWeights: empty weight vector");
    double sum = 0.0;
    for (double a : alpha) {
      if (!std::isfinite(a)) throw NumericError("SimplexWeights: non-finite entry");
      if (a < 0.0) throw ParameterError("SimplexWeights: negative entry " + std::to_string(a));
      sum += a;
    }
    if (std::abs(sum - 1.0) > kSumTolerance) {
      throw ParameterError("SimplexWeights: entries sum to " + std::to_string(sum));
    }
    SimplexWeights w;
    w.alpha_ = std::move(alpha);
    return w;
  }

  static SimplexWeights uniform(std::size_t k) {
    if (k == 0) throw EmptyInputError("SimplexWeights: K must be >= 1");
    return from(std::vector<double>(k, 1.0 / static_cast<double>(k)));
  }

  static SimplexWeights one_hot(std::size_t k, std::size_t index) {
    if (index >= k) throw DimensionError("SimplexWeights: one-hot index out of range");
    std::vector<double> a(k, 0.0);
    a[index] = 1.0;
    return from(std::move(a));
  }

  /// Convex combination lambda * a + (1 - lambda) * b. Stays on the simplex
  /// up to rounding, which is absorbed by a final renormalization.
  static SimplexWeights mix(const SimplexWeights& a, const SimplexWeights& b, double lambda) {
    vec::require_same_size(a.size(), b.size(), "SimplexWeights::mix");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("SimplexWeights::mix: lambda outside [0,1]");
    std::vector<double> out(a.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = lambda * a[i] + (1.0 - lambda) * b[i];
      sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return from(std::move(out));
  }

  std::size_t size() const noexcept { return alpha_.size(); }
  double operator[](std::size_t i) const { return alpha_[i]; }
  std::span<const double> values() const noexcept { return alpha_; }
  const std::vector<double>& vector() const noexcept { return alpha_; }

  friend bool operator==(const SimplexWeights&, const SimplexWeights&) = default;

private:
  std::vector<double> alpha_;
};

/// True when v is a valid simplex point within the given tolerance.
inline bool on_simplex(std::span<const double> v, double tol = SimplexWeights::kSumTolerance) {
  if (v.empty()) return false;
  double sum = 0.0;
  for (double a : v) {
    if (!std::isfinite(a) || a < 0.0) return false;
    sum += a;
  }
  return std::abs(sum - 1.0) <= tol;
}

}  // namespace marble
