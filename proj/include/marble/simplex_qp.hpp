// SPDX-License-Identifier: Apache-2.0
//
// Minimum-norm point in the convex hull of K vectors, posed over the
// probability simplex in Gram form:
//
//     alpha* = argmin_{alpha in simplex}  alpha^T G alpha,   G_ij = <g_i, g_j>
//
// Solved with away-step Frank-Wolfe (exact line search, warm start at the
// uniform point), followed by an exact solve of the KKT system on the final
// support. Everything works on the K x K Gram matrix, so full parameter
// vectors are touched only once while building it.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "marble/types.hpp"

namespace marble::qp {

inline constexpr double kDegeneracyThreshold = 1e-12;
inline constexpr int kDefaultMaxIters = 250;
inline constexpr double kDefaultTol = 1e-10;

/// Symmetric K x K matrix of pairwise inner products, row-major.
class GramMatrix {
public:
  GramMatrix() = default;
  explicit GramMatrix(std::size_t k) : k_(k), entries_(k * k, 0.0) {}

  /// Build from nested rows. Rows must be square; symmetry is not enforced
  /// here (solve_min_norm validates it).
  static GramMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    GramMatrix g(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      vec::require_same_size(rows[i].size(), rows.size(), "GramMatrix::from_rows");
      for (std::size_t j = 0; j < rows.size(); ++j) g(i, j) = rows[i][j];
    }
    return g;
  }

  std::size_t size() const noexcept { return k_; }
  double& operator()(std::size_t i, std::size_t j) { return entries_[i * k_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return entries_[i * k_ + j]; }

  double trace() const {
    double t = 0.0;
    for (std::size_t i = 0; i < k_; ++i) t += (*this)(i, i);
    return t;
  }

  /// alpha^T G alpha
  double quadratic_form(std::span<const double> alpha) const {
    vec::require_same_size(alpha.size(), k_, "GramMatrix::quadratic_form");
    double s = 0.0;
    for (std::size_t i = 0; i < k_; ++i)
      for (std::size_t j = 0; j < k_; ++j) s += alpha[i] * (*this)(i, j) * alpha[j];
    return s;
  }

  /// G alpha
  std::vector<double> multiply(std::span<const double> alpha) const {
    vec::require_same_size(alpha.size(), k_, "GramMatrix::multiply");
    std::vector<double> out(k_, 0.0);
    for (std::size_t i = 0; i < k_; ++i)
      for (std::size_t j = 0; j < k_; ++j) out[i] += (*this)(i, j) * alpha[j];
    return out;
  }

  /// Smallest eigenvalue (symmetric part).
  double min_eigenvalue() const {
    if (k_ == 0) return 0.0;
    Eigen::MatrixXd m(k_, k_);
    for (std::size_t i = 0; i < k_; ++i)
      for (std::size_t j = 0; j < k_; ++j) m(i, j) = 0.5 * ((*this)(i, j) + (*this)(j, i));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  }

private:
  std::size_t k_ = 0;
  std::vector<double> entries_;
};

struct QpSolution {
  SimplexWeights alpha;
  double objective = 0.0;  ///< ||d*||^2 = alpha^T G alpha
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;
  double fw_gap = 0.0;  ///< alpha^T G alpha - min_k (G alpha)_k, the KKT residual
};

inline GramMatrix build_gram(std::span<const GradientVector> gradients) {
  if (gradients.empty()) throw EmptyInputError("build_gram: no gradients");
  const std::size_t n = gradients.front().size();
  if (n == 0) throw EmptyInputError("build_gram: zero-length gradients");
  for (const auto& g : gradients) vec::require_same_size(g.size(), n, "build_gram");
  GramMatrix gram(gradients.size());
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    for (std::size_t j = i; j < gradients.size(); ++j) {
      const double d = vec::dot(gradients[i], gradients[j]);
      gram(i, j) = d;
      gram(j, i) = d;
    }
  }
  return gram;
}

/// Euclidean projection onto the simplex (sort-based).
inline SimplexWeights project_to_simplex(std::span<const double> v) {
  if (v.empty()) throw EmptyInputError("project_to_simplex: empty input");
  if (!vec::all_finite(v)) throw NumericError("project_to_simplex: non-finite input");
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    const double candidate = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - candidate > 0.0) theta = candidate;
  }
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::max(v[i] - theta, 0.0);
    sum += out[i];
  }
  for (auto& x : out) x /= sum;
  return SimplexWeights::from(std::move(out));
}

/// Analytic minimizer for K = 2: weight on the first vertex is
/// clamp((G22 - G12) / (G11 - 2 G12 + G22), 0, 1).
inline SimplexWeights solve_two_task_closed_form(const GramMatrix& gram) {
  if (gram.size() != 2) throw DimensionError("solve_two_task_closed_form: K must be 2");
  const double denom = gram(0, 0) - 2.0 * gram(0, 1) + gram(1, 1);
  if (denom <= 1e-15) return SimplexWeights::uniform(2);
  const double w = std::clamp((gram(1, 1) - gram(0, 1)) / denom, 0.0, 1.0);
  return SimplexWeights::from({w, 1.0 - w});
}

namespace detail {

inline void validate_gram(const GramMatrix& gram) {
  const std::size_t k = gram.size();
  if (k == 0) throw EmptyInputError("solve_min_norm: empty Gram matrix");
  double scale = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (!std::isfinite(gram(i, j))) throw NumericError("solve_min_norm: non-finite Gram entry");
      scale = std::max(scale, std::abs(gram(i, j)));
    }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j)
      if (std::abs(gram(i, j) - gram(j, i)) > 1e-12 * std::max(scale, 1.0))
        throw IllConditionedError("solve_min_norm: Gram matrix is not symmetric");
  const double trace = gram.trace();
  if (trace < 0.0) throw IllConditionedError("solve_min_norm: negative trace");
  if (gram.min_eigenvalue() < -1e-9 * std::max(trace, std::numeric_limits<double>::min()))
    throw IllConditionedError("solve_min_norm: Gram matrix is not positive semidefinite");
}

inline double fw_gap(const GramMatrix& gram, std::span<const double> alpha) {
  const auto c = gram.multiply(alpha);
  double obj = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) obj += alpha[i] * c[i];
  return obj - *std::min_element(c.begin(), c.end());
}

// Solve G_SS a = lambda 1, 1^T a = 1 on the support S. Returns an empty
// vector when the system is singular or the solution leaves the simplex.
inline std::vector<double> support_solve(const GramMatrix& gram, std::span<const double> alpha) {
  const std::size_t k = gram.size();
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < k; ++i)
    if (alpha[i] > 0.0) support.push_back(i);
  const auto s = static_cast<Eigen::Index>(support.size());
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(s + 1, s + 1);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(s + 1);
  for (Eigen::Index i = 0; i < s; ++i) {
    for (Eigen::Index j = 0; j < s; ++j) kkt(i, j) = gram(support[i], support[j]);
    kkt(i, s) = -1.0;
    kkt(s, i) = 1.0;
  }
  rhs(s) = 1.0;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
  if (!lu.isInvertible()) return {};
  const Eigen::VectorXd sol = lu.solve(rhs);
  std::vector<double> out(k, 0.0);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < s; ++i) {
    if (!std::isfinite(sol(i)) || sol(i) < 0.0) return {};
    out[support[i]] = sol(i);
    sum += sol(i);
  }
  if (!(sum > 0.0)) return {};
  for (auto& v : out) v /= sum;
  return out;
}

}  // namespace detail

/// Minimum-norm point over the simplex. Returns the best iterate with
/// converged = false when the Frank-Wolfe gap does not drop below tol
/// within max_iters.
inline QpSolution solve_min_norm(const GramMatrix& gram, int max_iters = kDefaultMaxIters,
                                 double tol = kDefaultTol) {
  if (max_iters < 1) throw ParameterError("solve_min_norm: max_iters must be >= 1");
  if (!(tol > 0.0)) throw ParameterError("solve_min_norm: tol must be > 0");
  detail::validate_gram(gram);

  const std::size_t k = gram.size();
  std::vector<double> alpha(k, 1.0 / static_cast<double>(k));
  std::vector<double> c = gram.multiply(alpha);
  double obj = gram.quadratic_form(alpha);

  QpSolution sol;
  int iter = 0;
  for (; iter < max_iters; ++iter) {
    const std::size_t toward =
        static_cast<std::size_t>(std::min_element(c.begin(), c.end()) - c.begin());
    const double gap = obj - c[toward];
    if (gap <= tol || obj <= kDegeneracyThreshold * 1e-4) break;

    std::size_t away = k;
    for (std::size_t i = 0; i < k; ++i)
      if (alpha[i] > 0.0 && (away == k || c[i] > c[away])) away = i;
    const double away_gap = c[away] - obj;

    // Direction d; slope = d^T c (half the directional derivative), curvature = d^T G d.
    double slope = 0.0, curvature = 0.0, step_max = 1.0;
    bool use_away = away_gap > gap && alpha[away] < 1.0;
    if (use_away) {
      slope = obj - c[away];
      curvature = obj - 2.0 * c[away] + gram(away, away);
      step_max = alpha[away] / (1.0 - alpha[away]);
    } else {
      slope = c[toward] - obj;
      curvature = gram(toward, toward) - 2.0 * c[toward] + obj;
    }
    double step = curvature > 0.0 ? std::min(-slope / curvature, step_max) : step_max;
    if (!(step > 0.0)) break;

    if (use_away) {
      for (auto& a : alpha) a *= (1.0 + step);
      alpha[away] -= step;
      if (step == step_max) alpha[away] = 0.0;
    } else {
      for (auto& a : alpha) a *= (1.0 - step);
      alpha[toward] += step;
    }
    for (auto& a : alpha) a = std::max(a, 0.0);
    const double sum = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    for (auto& a : alpha) a /= sum;
    c = gram.multiply(alpha);
    obj = gram.quadratic_form(alpha);
  }

  // Exact refinement on the identified support.
  double gap = detail::fw_gap(gram, alpha);
  if (gap > tol * 1e-2) {
    auto refined = detail::support_solve(gram, alpha);
    if (!refined.empty()) {
      const double refined_obj = gram.quadratic_form(refined);
      const double refined_gap = detail::fw_gap(gram, refined);
      if (refined_obj <= obj + 1e-15 && refined_gap <= std::max(gap, tol)) {
        alpha = std::move(refined);
        obj = refined_obj;
        gap = refined_gap;
      }
    }
  }

  sol.objective = std::max(obj, 0.0);
  sol.iterations = iter;
  sol.fw_gap = gap;
  sol.converged = gap <= tol || sol.objective <= kDegeneracyThreshold;
  sol.degenerate = sol.objective <= kDegeneracyThreshold;
  sol.alpha = SimplexWeights::from(std::move(alpha));
  return sol;
}

}  // namespace marble::qp
