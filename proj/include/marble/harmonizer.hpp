// SPDX-License-Identifier: Apache-2.0
//
// Gradient-space reward balancing.
//
// Full harmonization: normalize each per-reward gradient, solve the min-norm
// simplex QP, and rescale the min-norm direction by the mean raw norm.
// Amortized harmonization: refresh alpha* every N steps, smooth it with an
// EMA, and in between apply the smoothed coefficients in advantage space,
// A_bar = sum_k alpha_k A_k, which costs a single backward pass and equals
// sum_k alpha_k g_k exactly while no advantage hits the clamp.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marble/advantage.hpp"
#include "marble/nft.hpp"
#include "marble/simplex_qp.hpp"
#include "marble/types.hpp"
#include "marble/velocity_model.hpp"

namespace marble {

enum class HarmonizerMode { kFullEveryStep, kAmortized, kWeightedSum, kFixedAlpha };

inline const char* to_string(HarmonizerMode m) {
  switch (m) {
    case HarmonizerMode::kFullEveryStep: return "full_every_step";
    case HarmonizerMode::kAmortized: return "amortized";
    case HarmonizerMode::kWeightedSum: return "weighted_sum";
    case HarmonizerMode::kFixedAlpha: return "fixed_alpha";
  }
  return "unknown";
}

inline HarmonizerMode parse_mode(const std::string& s) {
  if (s == "full_every_step") return HarmonizerMode::kFullEveryStep;
  if (s == "amortized") return HarmonizerMode::kAmortized;
  if (s == "weighted_sum") return HarmonizerMode::kWeightedSum;
  if (s == "fixed_alpha") return HarmonizerMode::kFixedAlpha;
  throw ConfigError("unknown harmonizer mode '" + s + "'");
}

struct HarmonizerConfig {
  HarmonizerMode mode = HarmonizerMode::kAmortized;
  int amortization_interval = 10;
  double ema_decay = 0.7;
  /// Coefficients for fixed_alpha mode; weights for weighted_sum mode.
  /// Both default to uniform when unset.
  std::optional<SimplexWeights> fixed_alpha;
  bool normalize_gradients = true;
  /// weighted_sum only: aggregate raw rewards into one scalar per sample and
  /// z-score that (reward-space scalarization) instead of mixing gradients.
  bool scalarize_rewards = false;
  double learning_rate = 0.1;
  double kl_weight = 0.0;
  double a_max = kDefaultAMax;
  double beta = 1.0;
  double norm_eps = 1e-12;
  /// Switch to fixed uniform coefficients from this step on.
  std::optional<std::int64_t> uniform_after_step;
  int qp_max_iters = qp::kDefaultMaxIters;
  double qp_tol = qp::kDefaultTol;
  int threads = 1;

  NftLossConfig loss_config() const { return NftLossConfig{beta, a_max, kl_weight}; }

  void validate(std::size_t num_rewards) const {
    if (amortization_interval < 1) throw ConfigError("harmonizer.amortization_interval must be >= 1");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("harmonizer.ema_decay must lie in [0,1)");
    if (fixed_alpha && fixed_alpha->size() != num_rewards)
      throw ConfigError("harmonizer.fixed_alpha must have one entry per reward");
    if (!(learning_rate >= 0.0)) throw ConfigError("harmonizer.learning_rate must be >= 0");
    if (!(kl_weight >= 0.0)) throw ConfigError("harmonizer.kl_weight must be >= 0");
    if (!(a_max > 0.0)) throw ConfigError("harmonizer.a_max must be > 0");
    if (!(beta > 0.0)) throw ConfigError("harmonizer.beta must be > 0");
    if (!(norm_eps > 0.0)) throw ConfigError("harmonizer.norm_eps must be > 0");
    if (qp_max_iters < 1 || !(qp_tol > 0.0)) throw ConfigError("harmonizer QP settings invalid");
    if (threads < 1) throw ConfigError("harmonizer.threads must be >= 1");
  }
};

struct HarmonizerState {
  SimplexWeights smoothed_alpha;
  SimplexWeights last_solved_alpha;
  std::int64_t step = 0;
  std::int64_t steps_since_refresh = 0;
  std::int64_t qp_solves = 0;
  std::int64_t pareto_fallback_used = 0;
  std::int64_t clamp_activation_count = 0;
  std::int64_t degenerate_qp_count = 0;
  std::int64_t zero_signal_count = 0;

  static HarmonizerState initial(std::size_t num_rewards) {
    HarmonizerState s;
    s.smoothed_alpha = SimplexWeights::uniform(num_rewards);
    s.last_solved_alpha = s.smoothed_alpha;
    return s;
  }
};

struct UpdateDirection {
  GradientVector d_star;
  GradientVector d_final;
  double mean_norm = 1.0;
  SimplexWeights alpha_used;
};

// ---------------------------------------------------------------------------
// Stateless pieces
// ---------------------------------------------------------------------------

struct NormalizedGradients {
  std::vector<GradientVector> unit;
  std::vector<double> norms;
  std::vector<bool> zero_flag;  ///< input norm < eps; unit vector is zero
};

inline NormalizedGradients normalize_gradients(std::span<const GradientVector> gradients, double eps = 1e-12) {
  if (!(eps > 0.0)) throw ParameterError("normalize_gradients: eps must be > 0");
  NormalizedGradients out;
  for (const auto& g : gradients) {
    const double n = vec::norm(g);
    out.norms.push_back(n);
    if (n < eps) {
      out.unit.emplace_back(g.size(), 0.0);
      out.zero_flag.push_back(true);
    } else {
      out.unit.push_back(vec::scaled(g, 1.0 / n));
      out.zero_flag.push_back(false);
    }
  }
  return out;
}

struct HarmonizationResult {
  UpdateDirection direction;  ///< d* from alpha*, d_final = d* * n_bar
  SimplexWeights alpha_star;  ///< over all K rewards; zero-flagged rewards get 0
  qp::QpSolution qp;          ///< over the non-flagged subset
  std::vector<GradientVector> unit_gradients;
  std::vector<double> norms;
  std::vector<bool> zero_flag;
  bool degenerate = false;
};

/// d = sum_k alpha_k u_k
inline GradientVector combine(std::span<const GradientVector> vectors, const SimplexWeights& alpha) {
  if (vectors.empty()) throw EmptyInputError("combine: no vectors");
  vec::require_same_size(vectors.size(), alpha.size(), "combine: weights vs vectors");
  GradientVector d(vectors.front().size(), 0.0);
  for (std::size_t k = 0; k < vectors.size(); ++k) vec::axpy(alpha[k], vectors[k], d);
  return d;
}

inline HarmonizationResult solve_full_harmonization(std::span<const GradientVector> gradients,
                                                    const HarmonizerConfig& config) {
  if (gradients.empty()) throw EmptyInputError("solve_full_harmonization: no gradients");
  const std::size_t n = gradients.front().size();
  for (const auto& g : gradients) vec::require_same_size(g.size(), n, "solve_full_harmonization");
  const std::size_t k = gradients.size();

  auto normalized = normalize_gradients(gradients, config.norm_eps);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < k; ++i)
    if (!normalized.zero_flag[i]) active.push_back(i);
  if (active.empty()) throw NoSignalError("solve_full_harmonization: every reward gradient is zero");

  std::vector<GradientVector> qp_inputs;
  for (auto i : active) qp_inputs.push_back(config.normalize_gradients ? normalized.unit[i] : gradients[i]);
  const auto gram = qp::build_gram(qp_inputs);
  auto solution = qp::solve_min_norm(gram, config.qp_max_iters, config.qp_tol);

  std::vector<double> alpha(k, 0.0);
  for (std::size_t j = 0; j < active.size(); ++j) alpha[active[j]] = solution.alpha[j];

  HarmonizationResult out;
  out.alpha_star = SimplexWeights::from(std::move(alpha));
  out.direction.alpha_used = out.alpha_star;
  out.direction.d_star = combine(normalized.unit, out.alpha_star);
  double mean_norm = 0.0;
  for (double v : normalized.norms) mean_norm += v;
  mean_norm /= static_cast<double>(k);
  out.direction.mean_norm = mean_norm;
  out.direction.d_final = vec::scaled(out.direction.d_star, mean_norm);
  out.degenerate = solution.degenerate;
  out.qp = std::move(solution);
  out.unit_gradients = std::move(normalized.unit);
  out.norms = std::move(normalized.norms);
  out.zero_flag = std::move(normalized.zero_flag);
  return out;
}

inline GradientVector weighted_sum_direction(std::span<const GradientVector> gradients,
                                             const SimplexWeights& weights) {
  if (gradients.empty()) throw EmptyInputError("weighted_sum_direction: no gradients");
  for (const auto& g : gradients) vec::require_same_size(g.size(), gradients.front().size(), "weighted_sum_direction");
  return combine(gradients, weights);
}

/// alpha_bar <- rho * alpha_bar + (1 - rho) * alpha*
inline HarmonizerState ema_update(HarmonizerState state, const SimplexWeights& fresh_alpha, double rho) {
  if (!(rho >= 0.0 && rho < 1.0)) throw ParameterError("ema_update: rho must lie in [0,1)");
  if (state.smoothed_alpha.size() == 0) state.smoothed_alpha = SimplexWeights::uniform(fresh_alpha.size());
  state.smoothed_alpha = SimplexWeights::mix(state.smoothed_alpha, fresh_alpha, rho);
  return state;
}

inline double combined_advantage(std::span<const double> advantages, const SimplexWeights& alpha) {
  vec::require_same_size(advantages.size(), alpha.size(), "combined_advantage");
  return vec::dot(advantages, alpha.values());
}

/// theta <- theta - eta (d_final + beta_KL * kl_grad)
inline void apply_update(VelocityModel& model, const UpdateDirection& direction, std::span<const double> kl_grad,
                         const HarmonizerConfig& config) {
  auto params = model.mutable_params();
  vec::require_same_size(direction.d_final.size(), params.size(), "apply_update: direction");
  vec::require_same_size(kl_grad.size(), params.size(), "apply_update: KL gradient");
  const double eta = config.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i] -= eta * (direction.d_final[i] + config.kl_weight * kl_grad[i]);
}

/// Per-sample clamp bookkeeping for an advantage-space combination.
struct ClampReport {
  bool any_clamp = false;     ///< some |A_k| >= A_max or |A_bar| >= A_max
  bool deviation = false;     ///< clamping breaks sum_k alpha_k r_k == r(A_bar) somewhere
  std::vector<double> r_bar;  ///< r(A_bar) per sample (clamped)
};

inline ClampReport combined_r(const AdvantageMatrix& advantages, const SimplexWeights& alpha, double a_max) {
  vec::require_same_size(advantages.cols(), alpha.size(), "combined_r");
  ClampReport rep;
  rep.r_bar.resize(advantages.rows());
  for (std::size_t i = 0; i < advantages.rows(); ++i) {
    const auto row = advantages.row(i);
    const double a_bar = combined_advantage(row, alpha);
    const auto rb = advantage_to_r(a_bar, a_max);
    rep.r_bar[i] = rb.r;
    bool row_clamp = rb.clamp_active;
    double mixed = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) {
      const auto rk = advantage_to_r(row[k], a_max);
      row_clamp = row_clamp || rk.clamp_active;
      mixed += alpha[k] * rk.r;
    }
    rep.any_clamp = rep.any_clamp || row_clamp;
    if (row_clamp && std::abs(mixed - rb.r) > 1e-12) rep.deviation = true;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Stateful driver
// ---------------------------------------------------------------------------

/// Everything one harmonizer step produced. `gradients` and `harmonization`
/// are populated only on steps that computed all K per-reward gradients.
struct StepOutcome {
  UpdateDirection direction;  ///< reward part of the applied update
  bool refreshed = false;
  bool clamp_active = false;
  bool pareto_fallback = false;
  std::vector<GradientVector> gradients;
  std::optional<HarmonizationResult> harmonization;
  int backward_passes = 0;
};

class Harmonizer {
public:
  Harmonizer(HarmonizerConfig config, std::size_t num_rewards)
      : config_(std::move(config)), num_rewards_(num_rewards), state_(HarmonizerState::initial(num_rewards)) {
    config_.validate(num_rewards);
  }

  const HarmonizerConfig& config() const noexcept { return config_; }
  const HarmonizerState& state() const noexcept { return state_; }
  HarmonizerState& mutable_state() noexcept { return state_; }

  /// Coefficients fixed_alpha / weighted_sum modes use.
  SimplexWeights static_weights() const {
    return config_.fixed_alpha ? *config_.fixed_alpha : SimplexWeights::uniform(num_rewards_);
  }

  bool in_uniform_stage() const {
    return config_.uniform_after_step && state_.step >= *config_.uniform_after_step;
  }

  /// One reward-gradient step. `scalar_advantages` is required only for
  /// weighted_sum with scalarize_rewards (one column).
  StepOutcome step(const VelocityModel& model, const NftBatch& batch, const AdvantageMatrix& advantages,
                   const AdvantageMatrix* scalar_advantages = nullptr) {
    if (advantages.cols() != num_rewards_) throw DimensionError("Harmonizer::step: wrong number of reward columns");
    if (advantages.rows() != batch.size()) throw DimensionError("Harmonizer::step: advantages do not match batch");
    StepOutcome out;
    const auto loss = config_.loss_config();

    if (in_uniform_stage()) {
      apply_advantage_space(model, batch, advantages, SimplexWeights::uniform(num_rewards_), nullptr, out);
    } else {
      switch (config_.mode) {
        case HarmonizerMode::kAmortized: {
          if (state_.steps_since_refresh == 0) {
            refresh(model, batch, advantages, out);
            apply_advantage_space(model, batch, advantages, state_.smoothed_alpha, &out.gradients, out);
          } else {
            apply_advantage_space(model, batch, advantages, state_.smoothed_alpha, nullptr, out);
          }
          state_.steps_since_refresh = (state_.steps_since_refresh + 1) % config_.amortization_interval;
          break;
        }
        case HarmonizerMode::kFullEveryStep: {
          refresh(model, batch, advantages, out);
          const auto& h = *out.harmonization;
          UpdateDirection d;
          d.alpha_used = state_.smoothed_alpha;
          d.d_star = combine(h.unit_gradients, state_.smoothed_alpha);
          d.mean_norm = h.direction.mean_norm;
          d.d_final = vec::scaled(d.d_star, d.mean_norm);
          out.direction = std::move(d);
          count_clamps(advantages, state_.smoothed_alpha, out);
          break;
        }
        case HarmonizerMode::kWeightedSum: {
          const auto w = static_weights();
          if (config_.scalarize_rewards) {
            if (!scalar_advantages || scalar_advantages->cols() != 1 || scalar_advantages->rows() != batch.size())
              throw DimensionError("Harmonizer::step: scalarized weighted sum needs a one-column advantage matrix");
            const auto rs = column_to_r(*scalar_advantages, 0, config_.a_max);
            out.direction.d_final = nft_gradient(model, batch, rs, loss);
            out.backward_passes = 1;
            for (const auto& r : rs) out.clamp_active = out.clamp_active || r.clamp_active;
          } else {
            out.gradients = compute_gradients(model, batch, advantages);
            out.backward_passes = static_cast<int>(num_rewards_);
            out.direction.d_final = weighted_sum_direction(out.gradients, w);
            count_clamps(advantages, w, out);
          }
          out.direction.d_star = out.direction.d_final;
          out.direction.mean_norm = 1.0;
          out.direction.alpha_used = w;
          break;
        }
        case HarmonizerMode::kFixedAlpha:
          apply_advantage_space(model, batch, advantages, static_weights(), nullptr, out);
          break;
      }
    }

    if (out.clamp_active) ++state_.clamp_activation_count;
    if (out.pareto_fallback) ++state_.pareto_fallback_used;
    ++state_.step;
    return out;
  }

private:
  std::vector<GradientVector> compute_gradients(const VelocityModel& model, const NftBatch& batch,
                                                const AdvantageMatrix& advantages) const {
    const auto loss = config_.loss_config();
    if (config_.threads <= 1 || num_rewards_ == 1) return per_reward_gradients(model, batch, advantages, loss);
    // Each reward's gradient is independent; results are collected in reward order.
    std::vector<std::future<GradientVector>> jobs;
    for (std::size_t k = 0; k < num_rewards_; ++k) {
      jobs.push_back(std::async(std::launch::async, [&, k] {
        const auto rs = column_to_r(advantages, k, config_.a_max);
        return nft_gradient(model, batch, rs, loss);
      }));
    }
    std::vector<GradientVector> out;
    for (auto& j : jobs) out.push_back(j.get());
    return out;
  }

  void refresh(const VelocityModel& model, const NftBatch& batch, const AdvantageMatrix& advantages,
               StepOutcome& out) {
    out.refreshed = true;
    out.gradients = compute_gradients(model, batch, advantages);
    out.backward_passes += static_cast<int>(num_rewards_);
    auto h = solve_full_harmonization(out.gradients, config_);
    ++state_.qp_solves;
    for (bool z : h.zero_flag)
      if (z) ++state_.zero_signal_count;
    state_.last_solved_alpha = h.alpha_star;
    if (h.degenerate) {
      // Fully conflicting directions: keep the previous smoothed coefficients.
      ++state_.degenerate_qp_count;
    } else {
      state_ = ema_update(std::move(state_), h.alpha_star, config_.ema_decay);
    }
    out.harmonization = std::move(h);
  }

  void count_clamps(const AdvantageMatrix& advantages, const SimplexWeights& alpha, StepOutcome& out) const {
    const auto rep = combined_r(advantages, alpha, config_.a_max);
    out.clamp_active = rep.any_clamp;
  }

  // Applies alpha in advantage space. When the K per-reward gradients are
  // already at hand and no clamp interferes, sum_k alpha_k g_k is the same
  // vector a combined-advantage backward pass would produce.
  void apply_advantage_space(const VelocityModel& model, const NftBatch& batch, const AdvantageMatrix& advantages,
                             const SimplexWeights& alpha, const std::vector<GradientVector>* gradients,
                             StepOutcome& out) const {
    const auto rep = combined_r(advantages, alpha, config_.a_max);
    out.clamp_active = rep.any_clamp;
    out.pareto_fallback = rep.deviation;
    UpdateDirection d;
    d.alpha_used = alpha;
    if (gradients && !rep.deviation) {
      d.d_final = combine(*gradients, alpha);
    } else {
      d.d_final = nft_gradient(model, batch, rep.r_bar, config_.loss_config());
      out.backward_passes += 1;
    }
    d.d_star = d.d_final;
    d.mean_norm = 1.0;
    out.direction = std::move(d);
  }

  HarmonizerConfig config_;
  std::size_t num_rewards_;
  HarmonizerState state_;
};

/// Free-function form of one amortized step over an explicit state.
inline std::pair<StepOutcome, HarmonizerState> amortized_step(const VelocityModel& model, const NftBatch& batch,
                                                              const AdvantageMatrix& advantages,
                                                              HarmonizerState state, HarmonizerConfig config) {
  config.mode = HarmonizerMode::kAmortized;
  Harmonizer h(std::move(config), advantages.cols());
  h.mutable_state() = std::move(state);
  auto outcome = h.step(model, batch, advantages);
  return {std::move(outcome), h.state()};
}

}  // namespace marble
