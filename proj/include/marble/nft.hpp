// SPDX-License-Identifier: Apache-2.0
//
// NFT velocity-prediction loss and its exact reverse-mode gradient.
//
//   v+ = (1 - beta) v_old + beta v_theta
//   v- = (1 + beta) v_old - beta v_theta
//   l  = r ||v+ - v||^2 + (1 - r) ||v- - v||^2        (mean over batch elements)
//
// r enters affinely and the two branch losses do not depend on it, which is
// what lets a convex combination of per-reward gradients collapse into one
// backward pass with the combined advantage.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "marble/advantage.hpp"
#include "marble/types.hpp"
#include "marble/velocity_model.hpp"

namespace marble {

/// Training pairs, flat row-major storage (n elements, d = state dimension).
struct NftBatch {
  std::size_t dim = 2;
  std::vector<double> x_t;     ///< n x d
  std::vector<double> t;       ///< n
  std::vector<double> target;  ///< n x d, ground-truth velocity v
  std::vector<double> v_old;   ///< n x d, rollout-time snapshot velocity
  std::vector<int> condition;  ///< n

  std::size_t size() const noexcept { return t.size(); }
  std::span<const double> x(std::size_t i) const { return {x_t.data() + i * dim, dim}; }
  std::span<const double> v(std::size_t i) const { return {target.data() + i * dim, dim}; }
  std::span<const double> old(std::size_t i) const { return {v_old.data() + i * dim, dim}; }

  void push_back(std::span<const double> x, double time, std::span<const double> v, std::span<const double> vo,
                 int c) {
    x_t.insert(x_t.end(), x.begin(), x.end());
    t.push_back(time);
    target.insert(target.end(), v.begin(), v.end());
    v_old.insert(v_old.end(), vo.begin(), vo.end());
    condition.push_back(c);
  }

  /// Elements [begin, end).
  NftBatch slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size()) throw DimensionError("NftBatch::slice: bad range");
    NftBatch out;
    out.dim = dim;
    for (std::size_t i = begin; i < end; ++i) out.push_back(x(i), t[i], v(i), old(i), condition[i]);
    return out;
  }

  void validate() const {
    const std::size_t n = size();
    if (x_t.size() != n * dim || target.size() != n * dim || v_old.size() != n * dim || condition.size() != n)
      throw DimensionError("NftBatch: inconsistent field lengths");
    if (!vec::all_finite(x_t) || !vec::all_finite(target) || !vec::all_finite(v_old))
      throw NumericError("NftBatch: non-finite entries");
    for (double time : t)
      if (!(time > 0.0 && time < 1.0)) throw ParameterError("NftBatch: t must lie strictly inside (0,1)");
  }
};

struct NftLossConfig {
  double beta = 1.0;
  double a_max = kDefaultAMax;
  double kl_weight = 0.0;

  void validate() const {
    if (!(beta > 0.0)) throw ParameterError("NftLossConfig: beta must be > 0");
    if (!(a_max > 0.0)) throw ParameterError("NftLossConfig: a_max must be > 0");
    if (!(kl_weight >= 0.0)) throw ParameterError("NftLossConfig: kl_weight must be >= 0");
  }
};

namespace detail {

inline void check_inputs(const VelocityModel& model, const NftBatch& batch, std::span<const double> r,
                         const NftLossConfig& config) {
  config.validate();
  batch.validate();
  if (batch.size() == 0) throw EmptyInputError("nft: empty batch");
  if (batch.dim != model.shape().state_dim) throw DimensionError("nft: batch dimension differs from model");
  vec::require_same_size(r.size(), batch.size(), "nft: one r per batch element");
  for (double ri : r)
    if (!(ri >= 0.0 && ri <= 1.0)) throw ParameterError("nft: r outside [0,1]");
}

inline std::vector<double> r_values(std::span<const InterpolationCoefficient> rs) {
  std::vector<double> out(rs.size());
  for (std::size_t i = 0; i < rs.size(); ++i) out[i] = rs[i].r;
  return out;
}

/// Per-element branch residuals e+ = v+ - v and e- = v- - v.
inline void branch_residuals(std::span<const double> v_theta, std::span<const double> v_old,
                             std::span<const double> v, double beta, std::vector<double>& plus,
                             std::vector<double>& minus) {
  plus.resize(v.size());
  minus.resize(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) {
    plus[j] = (1.0 - beta) * v_old[j] + beta * v_theta[j] - v[j];
    minus[j] = (1.0 + beta) * v_old[j] - beta * v_theta[j] - v[j];
  }
}

// Shared reverse pass: each element contributes upstream(i) = w_plus(i) * 2 beta e+
// - w_minus(i) * 2 beta e-, and the batch mean is taken at the end.
template <typename WeightFn>
GradientVector nft_backward(const VelocityModel& model, const NftBatch& batch, double beta, WeightFn weights) {
  GradientVector grad(model.parameter_count(), 0.0);
  ForwardCache cache;
  std::vector<double> plus, minus, upstream(batch.dim);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto v_theta = model.forward(batch.x(i), batch.t[i], batch.condition[i], cache);
    branch_residuals(v_theta, batch.old(i), batch.v(i), beta, plus, minus);
    const auto [wp, wm] = weights(i);
    for (std::size_t j = 0; j < batch.dim; ++j) upstream[j] = 2.0 * beta * (wp * plus[j] - wm * minus[j]);
    model.backward(cache, upstream, grad);
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (auto& g : grad) g *= inv_n;
  return grad;
}

}  // namespace detail

inline double nft_loss(const VelocityModel& model, const NftBatch& batch, std::span<const double> r,
                       const NftLossConfig& config) {
  detail::check_inputs(model, batch, r, config);
  double total = 0.0;
  std::vector<double> plus, minus;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto v_theta = model.forward(batch.x(i), batch.t[i], batch.condition[i]);
    detail::branch_residuals(v_theta, batch.old(i), batch.v(i), config.beta, plus, minus);
    total += r[i] * vec::dot(plus, plus) + (1.0 - r[i]) * vec::dot(minus, minus);
  }
  return total / static_cast<double>(batch.size());
}

inline double nft_loss(const VelocityModel& model, const NftBatch& batch,
                       std::span<const InterpolationCoefficient> rs, const NftLossConfig& config) {
  return nft_loss(model, batch, detail::r_values(rs), config);
}

inline GradientVector nft_gradient(const VelocityModel& model, const NftBatch& batch, std::span<const double> r,
                                   const NftLossConfig& config) {
  detail::check_inputs(model, batch, r, config);
  return detail::nft_backward(model, batch, config.beta, [&](std::size_t i) {
    return std::pair<double, double>{r[i], 1.0 - r[i]};
  });
}

inline GradientVector nft_gradient(const VelocityModel& model, const NftBatch& batch,
                                   std::span<const InterpolationCoefficient> rs, const NftLossConfig& config) {
  return nft_gradient(model, batch, detail::r_values(rs), config);
}

/// Gradients of the positive and negative branch losses (batch means of
/// ||v+ - v||^2 and ||v- - v||^2) computed separately.
struct BranchGradients {
  GradientVector positive;
  GradientVector negative;
};

inline BranchGradients nft_branch_gradients(const VelocityModel& model, const NftBatch& batch,
                                            const NftLossConfig& config) {
  const std::vector<double> ones(batch.size(), 1.0);
  detail::check_inputs(model, batch, ones, config);
  BranchGradients out;
  out.positive = detail::nft_backward(model, batch, config.beta,
                                      [](std::size_t) { return std::pair<double, double>{1.0, 0.0}; });
  out.negative = detail::nft_backward(model, batch, config.beta,
                                      [](std::size_t) { return std::pair<double, double>{0.0, 1.0}; });
  return out;
}

/// One gradient per advantage column, each with its own r_k = clamp(1/2 + A_k / (2 A_max)).
inline std::vector<GradientVector> per_reward_gradients(const VelocityModel& model, const NftBatch& batch,
                                                        const AdvantageMatrix& advantages,
                                                        const NftLossConfig& config) {
  if (advantages.rows() != batch.size())
    throw DimensionError("per_reward_gradients: advantage rows (" + std::to_string(advantages.rows()) +
                         ") do not match batch size (" + std::to_string(batch.size()) + ")");
  if (advantages.cols() == 0) throw EmptyInputError("per_reward_gradients: no reward columns");
  std::vector<GradientVector> out;
  out.reserve(advantages.cols());
  for (std::size_t k = 0; k < advantages.cols(); ++k) {
    const auto rs = column_to_r(advantages, k, config.a_max);
    out.push_back(nft_gradient(model, batch, rs, config));
  }
  return out;
}

// -- KL surrogate ----------------------------------------------------------------
//
// Velocity-discrepancy stand-in for the policy KL: mean ||v_theta - v_ref||^2
// over the batch states.

inline void check_same_architecture(const VelocityModel& a, const VelocityModel& b) {
  if (!(a.shape() == b.shape())) throw DimensionError("KL surrogate: reference model architecture differs");
}

inline double kl_surrogate_loss(const VelocityModel& model, const VelocityModel& ref, const NftBatch& batch) {
  check_same_architecture(model, ref);
  if (batch.size() == 0) throw EmptyInputError("kl_surrogate_loss: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto v = model.forward(batch.x(i), batch.t[i], batch.condition[i]);
    const auto vr = ref.forward(batch.x(i), batch.t[i], batch.condition[i]);
    for (std::size_t j = 0; j < v.size(); ++j) total += (v[j] - vr[j]) * (v[j] - vr[j]);
  }
  return total / static_cast<double>(batch.size());
}

inline GradientVector kl_surrogate_gradient(const VelocityModel& model, const VelocityModel& ref,
                                            const NftBatch& batch) {
  check_same_architecture(model, ref);
  if (batch.size() == 0) throw EmptyInputError("kl_surrogate_gradient: empty batch");
  GradientVector grad(model.parameter_count(), 0.0);
  ForwardCache cache;
  // reference outputs first, so the two parameter sets are not interleaved
  std::vector<double> vr(batch.size() * batch.dim);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto out = ref.forward(batch.x(i), batch.t[i], batch.condition[i], cache);
    std::copy(out.begin(), out.end(), vr.begin() + static_cast<std::ptrdiff_t>(i * batch.dim));
  }
  std::vector<double> upstream(batch.dim);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto v = model.forward(batch.x(i), batch.t[i], batch.condition[i], cache);
    for (std::size_t j = 0; j < batch.dim; ++j) upstream[j] = 2.0 * (v[j] - vr[i * batch.dim + j]);
    model.backward(cache, upstream, grad);
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (auto& g : grad) g *= inv_n;
  return grad;
}

}  // namespace marble
