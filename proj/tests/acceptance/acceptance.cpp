// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Every tolerance and budget is pinned below.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "marble/marble.hpp"

using namespace marble;

namespace {

// -- pinned thresholds ----------------------------------------------------------
constexpr int kProp1Trials = 100;
constexpr double kProp1Tol = 1e-10;
constexpr double kProp1Budget = 10.0;
constexpr int kQpInstances = 200;
constexpr double kQpGridTol = 1e-4;
constexpr double kQpClosedFormTol = 1e-8;
constexpr double kQpKktSlack = 1e-8;
constexpr double kQpBudget = 30.0;
constexpr int kDescentSteps = 500;
constexpr double kDescentFinalTol = 1e-8;
constexpr int kConflictBatches = 20;
constexpr int kImproveSeeds = 5;
constexpr int kImproveSteps = 500;
constexpr double kImproveBudget = 300.0;
constexpr int kFdCoords = 24;
constexpr double kFdStep = 1e-5;
constexpr double kFdRelTol = 1e-5;
constexpr double kDdpTol = 1e-12;
constexpr double kZscoreTol = 1e-6;
constexpr double kEmaTol = 1e-10;
constexpr int kAccountingSteps = 100;
constexpr int kCostSteps = 200;
constexpr double kCostEnvelope = 2.0;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("CRITERION %2d %s  %s: %s\n", id, pass ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

experiment::ExperimentConfig toy_config(const std::string& preset, int steps) {
  auto c = experiment::preset(preset);
  c.training.steps = steps;
  return c;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  return vec::dot(a, b) / (vec::norm(a) * vec::norm(b));
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// -- 1 -------------------------------------------------------------------------
void criterion_prop1() {
  const auto t0 = Clock::now();
  checks::Prop1Options opt;
  opt.trials = kProp1Trials;
  opt.tolerance = kProp1Tol;
  const auto rep = checks::run_prop1_check(opt);
  const double t = seconds_since(t0);
  report(1, "prop1-exactness", rep.passed && rep.trials >= kProp1Trials && t < kProp1Budget,
         fmt("%d trials, max deviation %.3g (tol %.0e), one-hot %.3g, %d clamped trials excluded (%.3g), %.2fs "
             "(budget %.0fs)",
             rep.trials, rep.max_deviation, kProp1Tol, rep.one_hot_max_deviation, rep.clamped_trials,
             rep.clamped_max_deviation, t, kProp1Budget));
}

// -- 2 -------------------------------------------------------------------------
void criterion_qp() {
  const auto t0 = Clock::now();
  checks::QpCheckOptions opt;
  opt.instances = kQpInstances;
  opt.grid_step = 0.001;
  opt.grid_tolerance = kQpGridTol;
  opt.closed_form_tolerance = kQpClosedFormTol;
  opt.kkt_slack = kQpKktSlack;
  const auto rep = checks::run_qp_check(opt);
  const double t = seconds_since(t0);
  report(2, "qp-oracle", rep.passed && rep.instances == kQpInstances && t < kQpBudget,
         fmt("%d instances, grid gap %.3g (tol %.0e), closed-form gap %.3g (tol %.0e), min KKT margin %.3g "
             "(slack %.0e), %d KKT violations, %d degenerate, %.2fs (budget %.0fs)",
             rep.instances, rep.max_grid_gap, kQpGridTol, rep.max_closed_form_gap, kQpClosedFormTol,
             rep.min_kkt_margin, kQpKktSlack, rep.kkt_violations, rep.degenerate, t, kQpBudget));
}

// -- 3 -------------------------------------------------------------------------
void criterion_descent() {
  const auto cfg = toy_config("marble_default", kDescentSteps);
  experiment::Trainer tr(cfg, toy::default_scenario(), 0);
  int solves = 0, nondegenerate = 0, bad_star = 0, bad_final = 0;
  double min_star = 1.0, min_final = 1.0;
  tr.set_observer([&](std::int64_t, const StepOutcome& out) {
    if (!out.harmonization) return;
    ++solves;
    const auto& h = *out.harmonization;
    if (h.degenerate) return;
    ++nondegenerate;
    for (std::size_t k = 0; k < h.unit_gradients.size(); ++k) {
      if (h.zero_flag[k]) continue;
      const double cs = cosine(h.direction.d_star, h.unit_gradients[k]);
      const double cf = cosine(h.direction.d_final, out.gradients[k]);
      min_star = std::min(min_star, cs);
      min_final = std::min(min_final, cf);
      bad_star += cs > 0.0 ? 0 : 1;
      bad_final += cf >= -kDescentFinalTol ? 0 : 1;
    }
  });
  const auto res = tr.run();
  report(3, "descent", res.failure.empty() && nondegenerate > 0 && bad_star == 0 && bad_final == 0,
         fmt("%d-step run, %d solves (%d nondegenerate), min cos(d*,u_k) %.4f, min cos(d_final,g_k) %.4f "
             "(tol -%.0e)%s",
             kDescentSteps, solves, nondegenerate, min_star, min_final, kDescentFinalTol,
             res.failure.empty() ? "" : (", run failed: " + res.failure).c_str()));
}

// -- 4 -------------------------------------------------------------------------
void criterion_conflict() {
  const auto cfg = experiment::preset("marble_default");
  const auto scenario = toy::default_scenario();
  std::vector<HarmonyReport> harmonized, weighted;
  for (int b = 0; b < kConflictBatches; ++b) {
    experiment::Trainer tr(cfg, scenario, static_cast<std::uint64_t>(b));
    const auto p = tr.prepare(0);
    const auto g = per_reward_gradients(tr.model(), p.batch, p.batch_advantages, cfg.harmonizer.loss_config());
    const auto h = solve_full_harmonization(g, cfg.harmonizer);
    harmonized.push_back(harmony_stats(h.direction.d_final, g));
    weighted.push_back(harmony_stats(weighted_sum_direction(g, SimplexWeights::uniform(g.size())), g));
  }
  const double rw = aggregate_conflict_rate(weighted), rh = aggregate_conflict_rate(harmonized);
  report(4, "conflict-contrast", rw > 0.0 && rh == 0.0,
         fmt("%d batches at init: weighted-sum conflict rate %.3f (need > 0), harmonized %.3f (need 0)",
             kConflictBatches, rw, rh));
}

// -- 5 -------------------------------------------------------------------------
std::vector<double> mean_deltas(const std::string& preset, std::vector<std::string>& failures_out) {
  const auto cfg = toy_config(preset, kImproveSteps);
  const auto scenario = toy::default_scenario();
  std::vector<double> delta(scenario.num_rewards(), 0.0);
  for (int s = 0; s < kImproveSeeds; ++s) {
    experiment::Trainer tr(cfg, scenario, static_cast<std::uint64_t>(s));
    const auto r = tr.run();
    if (!r.failure.empty()) {
      failures_out.push_back(preset + " seed " + std::to_string(s) + ": " + r.failure);
      continue;
    }
    for (std::size_t k = 0; k < delta.size(); ++k)
      delta[k] += (r.final_rewards[k] - r.initial_rewards[k]) / kImproveSeeds;
  }
  return delta;
}

void criterion_improvement() {
  const auto t0 = Clock::now();
  std::vector<std::string> errs;
  const auto m = mean_deltas("marble_default", errs);
  const auto w = mean_deltas("weighted_sum", errs);
  const double t = seconds_since(t0);
  const auto names = toy::default_scenario().reward_names();
  bool all_up = true, some_down = false;
  std::string detail = "mean deltas over " + std::to_string(kImproveSeeds) + " seeds x " +
                       std::to_string(kImproveSteps) + " steps; marble_default";
  for (std::size_t k = 0; k < m.size(); ++k) {
    all_up = all_up && m[k] > 0.0;
    detail += fmt(" %s %+.4f", names[k].c_str(), m[k]);
  }
  detail += "; weighted_sum";
  for (std::size_t k = 0; k < w.size(); ++k) {
    some_down = some_down || w[k] < 0.0;
    detail += fmt(" %s %+.4f", names[k].c_str(), w[k]);
  }
  detail += fmt("; %.1fs (budget %.0fs)", t, kImproveBudget);
  for (const auto& e : errs) detail += "; " + e;
  report(5, "simultaneous-improvement", errs.empty() && all_up && some_down && t < kImproveBudget, detail);
}

// -- 6 -------------------------------------------------------------------------
void criterion_gradients() {
  const auto cfg = experiment::preset("marble_default");
  const auto scenario = toy::default_scenario();
  experiment::Trainer tr(cfg, scenario, 7);
  const auto p = tr.prepare(0);
  auto ref = tr.model();
  auto model = tr.model();
  std::mt19937_64 rng(606);
  std::normal_distribution<double> gauss(0.0, 0.05);
  for (auto& v : model.mutable_params()) v += gauss(rng);  // move off the reference so the KL gradient is nonzero
  std::vector<double> r(p.batch.size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& x : r) x = u(rng);
  const NftLossConfig loss;
  const auto g_nft = nft_gradient(model, p.batch, r, loss);
  const auto g_kl = kl_surrogate_gradient(model, ref, p.batch);
  double worst_nft = 0.0, worst_kl = 0.0;
  for (int c = 0; c < kFdCoords; ++c) {
    const std::size_t i = rng() % model.parameter_count();
    auto fd = [&](const std::function<double(const VelocityModel&)>& f) {
      auto m = model;
      const double orig = m.params()[i];
      m.mutable_params()[i] = orig + kFdStep;
      const double up = f(m);
      m.mutable_params()[i] = orig - kFdStep;
      return (up - f(m)) / (2 * kFdStep);
    };
    worst_nft = std::max(worst_nft, rel_err(g_nft[i], fd([&](const VelocityModel& m) {
                                      return nft_loss(m, p.batch, r, loss);
                                    })));
    worst_kl = std::max(worst_kl, rel_err(g_kl[i], fd([&](const VelocityModel& m) {
                                    return kl_surrogate_loss(m, ref, p.batch);
                                  })));
  }
  report(6, "gradient-correctness", worst_nft <= kFdRelTol && worst_kl <= kFdRelTol,
         fmt("%d coordinates of %zu, max rel error nft_loss %.3g, KL %.3g (tol %.0e)", kFdCoords,
             model.parameter_count(), worst_nft, worst_kl, kFdRelTol));
}

// -- 7 -------------------------------------------------------------------------
void criterion_ddp() {
  const auto cfg = experiment::preset("marble_default");
  experiment::Trainer tr(cfg, toy::default_scenario(), 11);
  const auto p = tr.prepare(0);
  const auto full = per_reward_gradients(tr.model(), p.batch, p.batch_advantages, cfg.harmonizer.loss_config());
  double worst = 0.0;
  bool identical = true;
  std::string err;
  for (int w : {1, 2, 4}) {
    try {
      const auto res = ddp::simulate_sync_step(ddp::shard_batch(p.batch, p.batch_advantages, w), tr.model(),
                                               cfg.harmonizer, true);
      for (std::size_t k = 0; k < full.size(); ++k) worst = std::max(worst, vec::max_abs_diff(res.averaged[k], full[k]));
      for (const auto& a : res.rank_alpha) identical = identical && a.vector() == res.rank_alpha.front().vector();
    } catch (const Error& e) {
      err += fmt(" world %d: %s", w, e.what());
      identical = false;
    }
  }
  report(7, "ddp-equivalence", err.empty() && worst <= kDdpTol && identical,
         fmt("world sizes 1,2,4 on %zu elements: max |avg - full| %.3g (tol %.0e), alpha identical on all ranks: %s%s",
             p.batch.size(), worst, kDdpTol, identical ? "yes" : "no", err.c_str()));
}

// -- 8 -------------------------------------------------------------------------
void criterion_invariants() {
  std::string detail;
  bool ok = true;

  // simplex validity of everything a run produces
  const auto cfg = toy_config("marble_default", 60);
  experiment::Trainer tr(cfg, toy::default_scenario(), 5);
  std::size_t simplex_checked = 0, simplex_bad = 0;
  tr.set_observer([&](std::int64_t, const StepOutcome& out) {
    ++simplex_checked;
    simplex_bad += on_simplex(out.direction.alpha_used.values()) ? 0 : 1;
    if (out.harmonization) {
      ++simplex_checked;
      simplex_bad += on_simplex(out.harmonization->alpha_star.values()) ? 0 : 1;
    }
  });
  const auto res = tr.run();
  for (const auto& r : res.records) {
    simplex_checked += 2;
    simplex_bad += (on_simplex(r.alpha_ema) ? 0 : 1) + (on_simplex(r.alpha_star) ? 0 : 1);
  }
  ok = ok && res.failure.empty() && simplex_bad == 0;
  detail += fmt("simplex %zu/%zu valid", simplex_checked - simplex_bad, simplex_checked);

  // z-score group invariants and r range over prepared batches
  double worst_mean = 0.0, worst_std = 0.0;
  std::size_t r_bad = 0, r_checked = 0;
  for (int s = 0; s < 10; ++s) {
    experiment::Trainer t2(experiment::preset("marble_default"), toy::default_scenario(), 100 + s);
    const auto p = t2.prepare(0);
    const auto& a = p.advantages;
    std::map<std::pair<int, std::size_t>, std::vector<double>> groups;
    std::map<std::pair<int, std::size_t>, std::vector<double>> raw;
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t k = 0; k < a.cols(); ++k) {
        groups[{a.prompt_id(i), k}].push_back(a(i, k));
        raw[{a.prompt_id(i), k}].push_back(p.rewards[i].rewards[k]);
        const auto r = advantage_to_r(a(i, k), kDefaultAMax);
        ++r_checked;
        r_bad += (r.r >= 0.0 && r.r <= 1.0) ? 0 : 1;
      }
    for (const auto& [key, z] : groups) {
      const auto& x = raw[key];
      const bool spread = *std::max_element(x.begin(), x.end()) != *std::min_element(x.begin(), x.end());
      double m = 0.0, v = 0.0;
      for (double e : z) m += e;
      m /= static_cast<double>(z.size());
      for (double e : z) v += (e - m) * (e - m);
      v /= static_cast<double>(z.size());
      worst_mean = std::max(worst_mean, std::abs(m));
      if (spread) worst_std = std::max(worst_std, std::abs(std::sqrt(v) - 1.0));
    }
  }
  ok = ok && worst_mean <= kZscoreTol && worst_std <= kZscoreTol && r_bad == 0;
  detail += fmt("; z-score |mean| %.2g, |std-1| %.2g (tol %.0e); r in [0,1] %zu/%zu", worst_mean, worst_std,
                kZscoreTol, r_checked - r_bad, r_checked);

  // EMA geometric convergence under a constant target
  double worst_ema = 0.0;
  std::mt19937_64 rng(808);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> w(3);
    for (auto& x : w) x = -std::log(1.0 - u(rng));
    const double s = w[0] + w[1] + w[2];
    for (auto& x : w) x /= s;
    const auto target = SimplexWeights::from(w);
    const double rho = 0.05 + 0.9 * u(rng);
    auto st = HarmonizerState::initial(3);
    auto diff0 = st.smoothed_alpha.vector();
    vec::axpy(-1.0, target.values(), diff0);
    const double d0 = vec::norm(diff0);
    for (int t = 1; t <= 50; ++t) {
      st = ema_update(st, target, rho);
      auto diff = st.smoothed_alpha.vector();
      vec::axpy(-1.0, target.values(), diff);
      worst_ema = std::max(worst_ema, std::abs(vec::norm(diff) - std::pow(rho, t) * d0));
      ok = ok && on_simplex(st.smoothed_alpha.values());
    }
  }
  ok = ok && worst_ema <= kEmaTol;
  detail += fmt("; EMA |err| %.2g (tol %.0e)", worst_ema, kEmaTol);
  report(8, "invariants", ok, detail);
}

// -- 9 -------------------------------------------------------------------------
void criterion_accounting() {
  const auto cfg = toy_config("marble_default", kAccountingSteps);
  experiment::Trainer tr(cfg, toy::default_scenario(), 9);
  const auto res = tr.run();
  const auto& s = res.final_state;
  const bool clamp_free = s.clamp_activation_count == 0;
  report(9, "amortization-accounting",
         res.failure.empty() && s.qp_solves == 10 && (!clamp_free || s.pareto_fallback_used == 0),
         fmt("%d steps, N=%d: %lld QP solves (need 10), clamp activations %lld, pareto_fallback_used %lld",
             kAccountingSteps, cfg.harmonizer.amortization_interval, static_cast<long long>(s.qp_solves),
             static_cast<long long>(s.clamp_activation_count), static_cast<long long>(s.pareto_fallback_used)));
}

// -- 10 ------------------------------------------------------------------------
double per_step_update_seconds(const std::string& preset) {
  double best = 1e300;
  for (int rep = 0; rep < 3; ++rep) {
    experiment::Trainer tr(toy_config(preset, kCostSteps), toy::default_scenario(), 13);
    const auto r = tr.run();
    if (!r.failure.empty()) return std::nan("");
    best = std::min(best, r.update_seconds / kCostSteps);
  }
  return best;
}

void criterion_cost() {
  const double amortized = per_step_update_seconds("marble_default");
  const double full = per_step_update_seconds("full_harmonization");
  const double k = 3.0, n = 10.0;
  const double bound = (k + n) / (n * (k + 1.0)) * kCostEnvelope;
  const double ratio = amortized / full;
  report(10, "cost-model", ratio <= bound,
         fmt("update phase per step: amortized %.3f ms, full per-step %.3f ms, ratio %.3f (bound %.3f = (K+N)/(N(K+1)) x %.0f)",
             amortized * 1e3, full * 1e3, ratio, bound, kCostEnvelope));
}

}  // namespace

int main() {
  const std::vector<std::function<void()>> criteria = {
      criterion_prop1, criterion_qp,        criterion_descent,    criterion_conflict,   criterion_improvement,
      criterion_gradients, criterion_ddp, criterion_invariants, criterion_accounting, criterion_cost};
  const auto t0 = Clock::now();
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    try {
      criteria[i]();
    } catch (const std::exception& e) {
      report(static_cast<int>(i + 1), "exception", false, e.what());
    }
  }
  std::printf("SUMMARY %d/%zu criteria passed in %.1fs\n", static_cast<int>(criteria.size()) - failures,
              criteria.size(), seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
