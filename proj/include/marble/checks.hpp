// SPDX-License-Identifier: Apache-2.0
//
// Self-check suites shared by the CLI verbs check-prop1 and check-qp.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "marble/advantage.hpp"
#include "marble/harmonizer.hpp"
#include "marble/nft.hpp"
#include "marble/simplex_qp.hpp"
#include "marble/types.hpp"
#include "marble/velocity_model.hpp"

namespace marble::checks {

struct Prop1Options {
  int trials = 100;
  std::uint64_t seed = 1;
  double tolerance = 1e-10;
  double a_max = kDefaultAMax;
  int clamped_trials = 5;  ///< extra trials with one forced |A| >= A_max
};

struct Prop1Report {
  int trials = 0;
  double max_deviation = 0.0;        ///< over unclamped trials
  int clamped_trials = 0;
  double clamped_max_deviation = 0.0;  ///< informational only
  double one_hot_max_deviation = 0.0;
  bool passed = false;
};

namespace detail {

struct RandomProblem {
  VelocityModel model;
  NftBatch batch;
  AdvantageMatrix advantages;
  SimplexWeights alpha;
};

inline RandomProblem random_problem(std::mt19937_64& rng, double a_max, bool force_clamp) {
  std::uniform_int_distribution<int> kdist(2, 5), ndist(4, 24), hdist(4, 16);
  std::uniform_real_distribution<double> unit(0.0, 1.0), sym(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto k = static_cast<std::size_t>(kdist(rng));
  const auto n = static_cast<std::size_t>(ndist(rng));
  ModelShape shape;
  shape.hidden = {static_cast<std::size_t>(hdist(rng)), static_cast<std::size_t>(hdist(rng))};
  RandomProblem p{VelocityModel(shape, ModelInit{.seed = rng(), .output_scale = 1.0}), {}, AdvantageMatrix(n, k), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const double x[2] = {gauss(rng), gauss(rng)};
    const double v[2] = {gauss(rng), gauss(rng)};
    const double vo[2] = {gauss(rng), gauss(rng)};
    p.batch.push_back(x, 0.05 + 0.9 * unit(rng), v, vo, static_cast<int>(rng() % shape.num_conditions));
    for (std::size_t j = 0; j < k; ++j) p.advantages(i, j) = 0.98 * a_max * sym(rng);
  }
  if (force_clamp) p.advantages(0, 0) = a_max * (1.0 + unit(rng));
  std::vector<double> w(k);
  for (auto& x : w) x = -std::log(1.0 - unit(rng));  // Dirichlet(1)
  double s = 0.0;
  for (double x : w) s += x;
  for (auto& x : w) x /= s;
  p.alpha = SimplexWeights::from(w);
  return p;
}

inline double combined_vs_mixture(const RandomProblem& p, const SimplexWeights& alpha, double a_max) {
  const NftLossConfig cfg{.beta = 1.0, .a_max = a_max};
  const auto per = per_reward_gradients(p.model, p.batch, p.advantages, cfg);
  const auto mix = combine(per, alpha);
  std::vector<double> abar(p.batch.size());
  for (std::size_t i = 0; i < abar.size(); ++i) abar[i] = combined_advantage(p.advantages.row(i), alpha);
  std::vector<InterpolationCoefficient> rs;
  for (double a : abar) rs.push_back(advantage_to_r(a, a_max));
  const auto single = nft_gradient(p.model, p.batch, rs, cfg);
  return vec::max_abs_diff(single, mix);
}

}  // namespace detail

inline Prop1Report run_prop1_check(const Prop1Options& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  Prop1Report rep;
  for (int t = 0; t < opt.trials; ++t) {
    const auto p = detail::random_problem(rng, opt.a_max, false);
    rep.max_deviation = std::max(rep.max_deviation, detail::combined_vs_mixture(p, p.alpha, opt.a_max));
    const auto hot = SimplexWeights::one_hot(p.alpha.size(), static_cast<std::size_t>(t) % p.alpha.size());
    rep.one_hot_max_deviation = std::max(rep.one_hot_max_deviation, detail::combined_vs_mixture(p, hot, opt.a_max));
    ++rep.trials;
  }
  for (int t = 0; t < opt.clamped_trials; ++t) {
    const auto p = detail::random_problem(rng, opt.a_max, true);
    rep.clamped_max_deviation =
        std::max(rep.clamped_max_deviation, detail::combined_vs_mixture(p, p.alpha, opt.a_max));
    ++rep.clamped_trials;
  }
  rep.passed = rep.max_deviation <= opt.tolerance;
  return rep;
}

// -- QP --------------------------------------------------------------------------

struct QpCheckOptions {
  int instances = 200;
  std::uint64_t seed = 2;
  double grid_step = 0.001;
  double grid_tolerance = 1e-4;
  double closed_form_tolerance = 1e-8;
  double kkt_slack = 1e-8;
};

struct QpCheckReport {
  int instances = 0;
  double max_grid_gap = 0.0;         ///< |solver objective - grid minimum|
  double max_closed_form_gap = 0.0;  ///< K=2 objective difference
  double min_kkt_margin = 0.0;       ///< min_k (G a)_k - a^T G a over nondegenerate instances
  int kkt_violations = 0;
  int degenerate = 0;
  bool passed = false;
};

inline double grid_minimum(const qp::GramMatrix& g, double step) {
  const int m = static_cast<int>(std::lround(1.0 / step));
  double best = std::numeric_limits<double>::infinity();
  if (g.size() == 2) {
    for (int i = 0; i <= m; ++i) {
      const double a = i * step;
      const double w[2] = {a, 1.0 - a};
      best = std::min(best, g.quadratic_form(w));
    }
    return best;
  }
  if (g.size() != 3) throw DimensionError("grid_minimum: K must be 2 or 3");
  for (int i = 0; i <= m; ++i)
    for (int j = 0; i + j <= m; ++j) {
      const double w[3] = {i * step, j * step, 1.0 - (i + j) * step};
      best = std::min(best, g.quadratic_form(w));
    }
  return best;
}

inline QpCheckReport run_qp_check(const QpCheckOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> ddist(2, 6);
  QpCheckReport rep;
  rep.min_kkt_margin = std::numeric_limits<double>::infinity();
  for (int t = 0; t < opt.instances; ++t) {
    const std::size_t k = (t % 2 == 0) ? 2 : 3;
    const auto d = static_cast<std::size_t>(ddist(rng));
    std::vector<GradientVector> gs(k, GradientVector(d));
    for (auto& g : gs) {
      for (auto& x : g) x = gauss(rng);
      g = vec::scaled(g, 1.0 / vec::norm(g));
    }
    const auto gram = qp::build_gram(gs);
    const auto sol = qp::solve_min_norm(gram);
    rep.max_grid_gap = std::max(rep.max_grid_gap, std::abs(sol.objective - grid_minimum(gram, opt.grid_step)));
    if (k == 2) {
      const auto cf = qp::solve_two_task_closed_form(gram);
      rep.max_closed_form_gap =
          std::max(rep.max_closed_form_gap, std::abs(sol.objective - gram.quadratic_form(cf.values())));
    }
    if (sol.degenerate) {
      ++rep.degenerate;
    } else {
      const auto ga = gram.multiply(sol.alpha.values());
      const double q = gram.quadratic_form(sol.alpha.values());
      const double margin = *std::min_element(ga.begin(), ga.end()) - q;
      rep.min_kkt_margin = std::min(rep.min_kkt_margin, margin);
      if (margin < -opt.kkt_slack) ++rep.kkt_violations;
    }
    ++rep.instances;
  }
  rep.passed = rep.max_grid_gap <= opt.grid_tolerance && rep.max_closed_form_gap <= opt.closed_form_tolerance &&
               rep.kkt_violations == 0;
  return rep;
}

}  // namespace marble::checks
