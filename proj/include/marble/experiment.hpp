// SPDX-License-Identifier: Apache-2.0
//
// Config-driven experiment runner: resolves presets and config files,
// trains the toy policy under one harmonizer mode, and writes the run
// artifacts (metrics JSONL, reward/coefficient curves, heatmap, manifest).
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marble/advantage.hpp"
#include "marble/diagnostics.hpp"
#include "marble/harmonizer.hpp"
#include "marble/nft.hpp"
#include "marble/toy_env.hpp"
#include "marble/types.hpp"
#include "marble/velocity_model.hpp"

namespace marble::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

struct TrainingConfig {
  int steps = 500;
  int group_size = 16;
  int timesteps_per_sample = 2;
  int ode_steps = 20;
  double t_min = 0.05;
  double t_max = 0.95;
  StatsMode stats_mode = StatsMode::kBatch;
  double epsilon = kDefaultAdvantageEpsilon;
  int eval_group_size = 256;
};

struct ModelConfig {
  std::vector<std::size_t> hidden = {32, 32};
  double output_scale = 0.1;
  bool zero_output = false;
};

struct ExperimentConfig {
  std::string preset;
  std::string scenario = "default";  ///< "default" or a path to a scenario JSON file
  HarmonizerConfig harmonizer;
  ModelConfig model;
  TrainingConfig training;
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir = "runs/marble";
};

// -- config (JSON with nesting; unknown keys are errors) --------------------------

namespace detail {

inline void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
}

template <typename T>
T get_as(const json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void apply_harmonizer(HarmonizerConfig& h, const json& j, std::size_t /*num_rewards_hint*/) {
  expect_object(j, "harmonizer");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = it.key();
    const std::string path = "harmonizer." + key;
    const json& v = it.value();
    if (key == "mode") h.mode = parse_mode(get_as<std::string>(v, path));
    else if (key == "amortization_interval") h.amortization_interval = get_as<int>(v, path);
    else if (key == "ema_decay") h.ema_decay = get_as<double>(v, path);
    else if (key == "fixed_alpha") {
      if (v.is_null()) h.fixed_alpha.reset();
      else {
        try {
          h.fixed_alpha = SimplexWeights::from(get_as<std::vector<double>>(v, path));
        } catch (const ConfigError&) {
          throw;
        } catch (const Error& e) {
          throw ConfigError(path + ": " + e.what());
        }
      }
    } else if (key == "normalize_gradients") h.normalize_gradients = get_as<bool>(v, path);
    else if (key == "scalarize_rewards") h.scalarize_rewards = get_as<bool>(v, path);
    else if (key == "learning_rate") h.learning_rate = get_as<double>(v, path);
    else if (key == "kl_weight") h.kl_weight = get_as<double>(v, path);
    else if (key == "a_max") h.a_max = get_as<double>(v, path);
    else if (key == "beta") h.beta = get_as<double>(v, path);
    else if (key == "norm_eps") h.norm_eps = get_as<double>(v, path);
    else if (key == "uniform_after_step") {
      if (v.is_null()) h.uniform_after_step.reset();
      else h.uniform_after_step = get_as<std::int64_t>(v, path);
    } else if (key == "qp_max_iters") h.qp_max_iters = get_as<int>(v, path);
    else if (key == "qp_tol") h.qp_tol = get_as<double>(v, path);
    else if (key == "threads") h.threads = get_as<int>(v, path);
    else throw ConfigError(path + ": unknown key");
  }
}

inline void apply_model(ModelConfig& m, const json& j) {
  expect_object(j, "model");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = "model." + it.key();
    if (it.key() == "hidden") m.hidden = get_as<std::vector<std::size_t>>(it.value(), path);
    else if (it.key() == "output_scale") m.output_scale = get_as<double>(it.value(), path);
    else if (it.key() == "zero_output") m.zero_output = get_as<bool>(it.value(), path);
    else throw ConfigError(path + ": unknown key");
  }
}

inline void apply_training(TrainingConfig& t, const json& j) {
  expect_object(j, "training");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = it.key();
    const std::string path = "training." + key;
    const json& v = it.value();
    if (key == "steps") t.steps = get_as<int>(v, path);
    else if (key == "group_size") t.group_size = get_as<int>(v, path);
    else if (key == "timesteps_per_sample") t.timesteps_per_sample = get_as<int>(v, path);
    else if (key == "ode_steps") t.ode_steps = get_as<int>(v, path);
    else if (key == "t_min") t.t_min = get_as<double>(v, path);
    else if (key == "t_max") t.t_max = get_as<double>(v, path);
    else if (key == "stats_mode") {
      const auto s = get_as<std::string>(v, path);
      if (s == "batch") t.stats_mode = StatsMode::kBatch;
      else if (s == "running") t.stats_mode = StatsMode::kRunning;
      else throw ConfigError(path + ": expected 'batch' or 'running'");
    } else if (key == "epsilon") t.epsilon = get_as<double>(v, path);
    else if (key == "eval_group_size") t.eval_group_size = get_as<int>(v, path);
    else throw ConfigError(path + ": unknown key");
  }
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  return {"marble_default", "weighted_sum",    "fixed_alpha_uniform",  "per_step_solve",
          "no_normalization", "uniform_consolidation", "full_harmonization"};
}

/// Baseline config for a named preset.
inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  auto& h = c.harmonizer;
  if (name == "marble_default") {
    h.mode = HarmonizerMode::kAmortized;
    h.amortization_interval = 10;
    h.ema_decay = 0.7;
  } else if (name == "weighted_sum") {
    h.mode = HarmonizerMode::kWeightedSum;
  } else if (name == "fixed_alpha_uniform") {
    h.mode = HarmonizerMode::kFixedAlpha;  // fixed_alpha unset -> 1/K
  } else if (name == "per_step_solve") {
    h.mode = HarmonizerMode::kAmortized;
    h.amortization_interval = 1;
    h.ema_decay = 0.0;
  } else if (name == "no_normalization") {
    h.mode = HarmonizerMode::kAmortized;
    h.normalize_gradients = false;
  } else if (name == "uniform_consolidation") {
    h.mode = HarmonizerMode::kAmortized;
    h.uniform_after_step = (c.training.steps * 4) / 5;
  } else if (name == "full_harmonization") {
    h.mode = HarmonizerMode::kFullEveryStep;
    h.ema_decay = 0.0;
  } else {
    throw ConfigError("preset: unknown preset '" + name + "'");
  }
  return c;
}

/// Resolve a config document: start from the named preset (or defaults) and
/// overlay every key present.
inline ExperimentConfig config_from_json(const json& j) {
  detail::expect_object(j, "config");
  ExperimentConfig c;
  if (j.contains("preset") && !j["preset"].is_null()) c = preset(detail::get_as<std::string>(j["preset"], "preset"));
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = it.key();
    const json& v = it.value();
    if (key == "preset") continue;
    if (key == "scenario") c.scenario = detail::get_as<std::string>(v, key);
    else if (key == "harmonizer") detail::apply_harmonizer(c.harmonizer, v, 0);
    else if (key == "model") detail::apply_model(c.model, v);
    else if (key == "training") detail::apply_training(c.training, v);
    else if (key == "seeds") c.seeds = detail::get_as<std::vector<std::uint64_t>>(v, key);
    else if (key == "output_dir") c.output_dir = detail::get_as<std::string>(v, key);
    else throw ConfigError(key + ": unknown key");
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

inline json config_to_json(const ExperimentConfig& c) {
  const auto& h = c.harmonizer;
  json hj = {{"mode", to_string(h.mode)},
             {"amortization_interval", h.amortization_interval},
             {"ema_decay", h.ema_decay},
             {"fixed_alpha", h.fixed_alpha ? json(h.fixed_alpha->vector()) : json(nullptr)},
             {"normalize_gradients", h.normalize_gradients},
             {"scalarize_rewards", h.scalarize_rewards},
             {"learning_rate", h.learning_rate},
             {"kl_weight", h.kl_weight},
             {"a_max", h.a_max},
             {"beta", h.beta},
             {"norm_eps", h.norm_eps},
             {"uniform_after_step", h.uniform_after_step ? json(*h.uniform_after_step) : json(nullptr)},
             {"qp_max_iters", h.qp_max_iters},
             {"qp_tol", h.qp_tol},
             {"threads", h.threads}};
  const auto& t = c.training;
  json tj = {{"steps", t.steps},
             {"group_size", t.group_size},
             {"timesteps_per_sample", t.timesteps_per_sample},
             {"ode_steps", t.ode_steps},
             {"t_min", t.t_min},
             {"t_max", t.t_max},
             {"stats_mode", t.stats_mode == StatsMode::kBatch ? "batch" : "running"},
             {"epsilon", t.epsilon},
             {"eval_group_size", t.eval_group_size}};
  json j = {{"scenario", c.scenario},
            {"harmonizer", hj},
            {"model", {{"hidden", c.model.hidden}, {"output_scale", c.model.output_scale},
                       {"zero_output", c.model.zero_output}}},
            {"training", tj},
            {"seeds", c.seeds},
            {"output_dir", c.output_dir}};
  j["preset"] = c.preset.empty() ? json(nullptr) : json(c.preset);
  return j;
}

inline toy::Scenario resolve_scenario(const ExperimentConfig& c) {
  if (c.scenario == "default") return toy::default_scenario();
  if (!fs::exists(c.scenario)) throw ConfigError("scenario: file not found: " + c.scenario);
  return toy::load_scenario(c.scenario);
}

inline void validate(const ExperimentConfig& c, std::size_t num_rewards) {
  c.harmonizer.validate(num_rewards);
  const auto& t = c.training;
  if (t.steps < 0) throw ConfigError("training.steps must be >= 0");
  if (t.group_size < 2) throw ConfigError("training.group_size must be >= 2");
  if (t.timesteps_per_sample < 1) throw ConfigError("training.timesteps_per_sample must be >= 1");
  if (t.ode_steps < 1) throw ConfigError("training.ode_steps must be >= 1");
  if (!(t.t_min > 0.0 && t.t_max < 1.0 && t.t_min <= t.t_max)) throw ConfigError("training.t_min/t_max must lie in (0,1)");
  if (!(t.epsilon > 0.0)) throw ConfigError("training.epsilon must be > 0");
  if (t.eval_group_size < 2) throw ConfigError("training.eval_group_size must be >= 2");
  if (c.seeds.empty()) throw ConfigError("seeds: must be nonempty");
  if (c.model.hidden.empty()) throw ConfigError("model.hidden: need at least one hidden layer");
}

// -- training ------------------------------------------------------------------------

/// Mean raw reward per column over a fixed evaluation seed.
inline std::vector<double> evaluate_policy(const VelocityModel& model, const toy::Scenario& scenario,
                                           int group_size, int ode_steps, std::uint64_t seed) {
  const auto prompts = scenario.prompt_ids();
  const auto rollouts = toy::sample_rollouts(model, prompts, group_size, ode_steps, seed);
  const auto samples = toy::evaluate_rewards(rollouts, scenario);
  std::vector<double> mean(scenario.num_rewards(), 0.0);
  for (const auto& s : samples)
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += s.rewards[k];
  for (auto& m : mean) m /= static_cast<double>(samples.size());
  return mean;
}

struct RunResult {
  std::uint64_t seed = 0;
  std::vector<StepRecord> records;
  std::vector<double> initial_rewards;  ///< evaluation means before training
  std::vector<double> final_rewards;    ///< evaluation means after training
  HarmonizerState final_state;
  AdvantageMatrix last_advantages;      ///< rollout-level advantages of the last step
  double update_seconds = 0.0;          ///< gradient + harmonization + parameter update
  double total_seconds = 0.0;
  int steps_completed = 0;
  std::int64_t backward_passes = 0;
  std::string failure;                  ///< nonempty if the run aborted
};

inline ModelShape model_shape(const ExperimentConfig& c, const toy::Scenario& s) {
  ModelShape shape;
  shape.state_dim = toy::kStateDim;
  shape.num_conditions = s.prompts.size();
  shape.hidden = c.model.hidden;
  return shape;
}

inline VelocityModel initial_model(const ExperimentConfig& c, const toy::Scenario& s, std::uint64_t seed) {
  ModelInit init;
  init.seed = toy::mix_seed(seed, 0x1417);
  init.output_scale = c.model.output_scale;
  init.zero_output = c.model.zero_output;
  return VelocityModel(model_shape(c, s), init);
}

/// Fixed evaluation noise, shared by every seed and mode.
inline constexpr std::uint64_t kEvalSeed = 0xE7A1;

/// Trains one seed. Step-level seeds come from mix_seed(seed, stream + step),
/// so reruns are bit-identical.
class Trainer {
public:
  Trainer(ExperimentConfig config, toy::Scenario scenario, std::uint64_t seed)
      : config_(std::move(config)), scenario_(std::move(scenario)), seed_(seed),
        model_(initial_model(config_, scenario_, seed)), reference_(model_),
        harmonizer_(config_.harmonizer, scenario_.num_rewards()),
        engine_(scenario_.num_rewards(), config_.training.stats_mode, config_.training.epsilon),
        scalar_engine_(1, config_.training.stats_mode, config_.training.epsilon) {
    validate(config_, scenario_.num_rewards());
  }

  const VelocityModel& model() const noexcept { return model_; }
  VelocityModel& mutable_model() noexcept { return model_; }
  const Harmonizer& harmonizer() const noexcept { return harmonizer_; }
  const toy::Scenario& scenario() const noexcept { return scenario_; }

  /// Called after every harmonizer step, outside the timed region.
  using Observer = std::function<void(std::int64_t step, const StepOutcome&)>;
  void set_observer(Observer observer) { observer_ = std::move(observer); }

  struct Prepared {
    toy::RolloutBatch rollouts;
    std::vector<RewardSample> rewards;
    AdvantageMatrix advantages;       ///< one row per rollout sample
    AdvantageMatrix batch_advantages; ///< one row per training element
    std::optional<AdvantageMatrix> scalar_advantages;
    NftBatch batch;
  };

  /// Rollouts, rewards, advantages and training pairs for `step`.
  Prepared prepare(std::int64_t step) {
    const auto& t = config_.training;
    Prepared p;
    const auto prompts = scenario_.prompt_ids();
    p.rollouts = toy::sample_rollouts(model_, prompts, t.group_size, t.ode_steps,
                                      toy::mix_seed(seed_, 0x100000 + static_cast<std::uint64_t>(step)));
    p.rewards = toy::evaluate_rewards(p.rollouts, scenario_);
    p.advantages = engine_.process(p.rewards);
    p.advantages.set_reward_names(scenario_.reward_names());
    p.batch_advantages = p.advantages.repeat_rows(static_cast<std::size_t>(t.timesteps_per_sample));
    if (config_.harmonizer.mode == HarmonizerMode::kWeightedSum && config_.harmonizer.scalarize_rewards) {
      const auto w = harmonizer_.static_weights();
      std::vector<RewardSample> scalar;
      for (const auto& s : p.rewards) {
        scalar.push_back({s.sample_id, s.prompt_id, {combined_advantage(s.rewards, w)}});
      }
      p.scalar_advantages =
          scalar_engine_.process(scalar).repeat_rows(static_cast<std::size_t>(t.timesteps_per_sample));
    }
    // model_ is the rollout-time snapshot: v_old is evaluated before the update.
    p.batch = toy::build_training_batch(p.rollouts, t.timesteps_per_sample,
                                        toy::mix_seed(seed_, 0x200000 + static_cast<std::uint64_t>(step)), model_,
                                        {t.t_min, t.t_max});
    return p;
  }

  /// One full training step; returns its log record.
  StepRecord step(std::int64_t index, double* update_seconds = nullptr, int* backward_passes = nullptr) {
    auto p = prepare(index);
    const auto start = std::chrono::steady_clock::now();
    auto outcome = harmonizer_.step(model_, p.batch, p.batch_advantages,
                                    p.scalar_advantages ? &*p.scalar_advantages : nullptr);
    const auto kl = kl_surrogate_gradient(model_, reference_, p.batch);
    apply_update(model_, outcome.direction, kl, config_.harmonizer);
    const auto stop = std::chrono::steady_clock::now();
    if (update_seconds) *update_seconds += std::chrono::duration<double>(stop - start).count();
    if (backward_passes) *backward_passes += outcome.backward_passes + 1;
    if (observer_) observer_(index, outcome);
    last_advantages_ = std::move(p.advantages);
    return make_record(index, outcome, p.rewards);
  }

  RunResult run() {
    RunResult res;
    res.seed = seed_;
    const auto& t = config_.training;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      res.initial_rewards = evaluate_policy(model_, scenario_, t.eval_group_size, t.ode_steps, kEvalSeed);
      for (int s = 0; s < t.steps; ++s) {
        int passes = 0;
        res.records.push_back(step(s, &res.update_seconds, &passes));
        res.backward_passes += passes;
        ++res.steps_completed;
      }
      res.final_rewards = evaluate_policy(model_, scenario_, t.eval_group_size, t.ode_steps, kEvalSeed);
    } catch (const Error& e) {
      res.failure = e.what();
    }
    res.final_state = harmonizer_.state();
    res.last_advantages = last_advantages_;
    res.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
  }

private:
  StepRecord make_record(std::int64_t index, const StepOutcome& outcome, const std::vector<RewardSample>& rewards) {
    const auto& st = harmonizer_.state();
    StepRecord r;
    r.step = index;
    r.mode = harmonizer_.in_uniform_stage() ? "uniform_stage" : to_string(config_.harmonizer.mode);
    r.refreshed = outcome.gradients.size() == scenario_.num_rewards();
    r.alpha_star = st.last_solved_alpha.vector();
    r.alpha_ema = outcome.direction.alpha_used.size() ? outcome.direction.alpha_used.vector()
                                                      : st.smoothed_alpha.vector();
    r.reward_means.assign(scenario_.num_rewards(), 0.0);
    for (const auto& s : rewards)
      for (std::size_t k = 0; k < r.reward_means.size(); ++k) r.reward_means[k] += s.rewards[k];
    for (auto& m : r.reward_means) m /= static_cast<double>(rewards.size());
    r.counters = {st.qp_solves, st.clamp_activation_count, st.pareto_fallback_used, st.degenerate_qp_count,
                  st.zero_signal_count};
    if (r.refreshed) {
      std::vector<double> norms;
      for (const auto& g : outcome.gradients) norms.push_back(vec::norm(g));
      r.grad_norms = norms;
      double mean = 0.0;
      for (double n : norms) mean += n;
      r.mean_norm = mean / static_cast<double>(norms.size());
      bool any_signal = false;
      for (double n : norms) any_signal = any_signal || n >= config_.harmonizer.norm_eps;
      if (any_signal) {
        const auto h = outcome.harmonization ? *outcome.harmonization
                                             : solve_full_harmonization(outcome.gradients, config_.harmonizer);
        r.harmony_harmonized = harmony_stats(h.direction.d_final, outcome.gradients);
        r.harmony_weighted_sum = harmony_stats(
            weighted_sum_direction(outcome.gradients, SimplexWeights::uniform(scenario_.num_rewards())),
            outcome.gradients);
      }
    }
    return r;
  }

  ExperimentConfig config_;
  toy::Scenario scenario_;
  std::uint64_t seed_;
  VelocityModel model_;
  VelocityModel reference_;
  Harmonizer harmonizer_;
  AdvantageEngine engine_;
  AdvantageEngine scalar_engine_;
  AdvantageMatrix last_advantages_;
  Observer observer_;
};

// -- artifacts -----------------------------------------------------------------------

struct ExperimentSummary {
  std::vector<RunResult> runs;
  bool ok = true;
  std::string directory;
};

inline std::string seed_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

inline void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string());
  out << j.dump(2) << '\n';
}

inline json run_summary_json(const RunResult& r) {
  const auto& s = r.final_state;
  return {{"seed", r.seed},
          {"steps_completed", r.steps_completed},
          {"initial_rewards", r.initial_rewards},
          {"final_rewards", r.final_rewards},
          {"counters", {{"qp_solves", s.qp_solves},
                        {"clamp_activation_count", s.clamp_activation_count},
                        {"pareto_fallback_used", s.pareto_fallback_used},
                        {"degenerate_qp_count", s.degenerate_qp_count},
                        {"zero_signal_count", s.zero_signal_count}}},
          {"final_alpha_ema", s.smoothed_alpha.vector()},
          {"backward_passes", r.backward_passes},
          {"status", r.failure.empty() ? "ok" : "failed"},
          {"failure", r.failure.empty() ? json(nullptr) : json(r.failure)}};
}

/// Runs every seed and writes, under output_dir:
///   manifest.json                      resolved config, scenario, per-seed summaries
///   seed_<s>/metrics.jsonl             one StepRecord per step
///   seed_<s>/reward_curves.csv         per-step mean rewards
///   seed_<s>/coefficients.csv          alpha_ema / alpha_star / pareto_fallback_used
///   seed_<s>/heatmap.csv               last step's samples x rewards advantages
///   seed_<s>/model.ckpt                final parameters
/// Timing is kept out of the files so reruns are byte-identical.
inline ExperimentSummary run_experiment(const ExperimentConfig& config) {
  const auto scenario = resolve_scenario(config);
  validate(config, scenario.num_rewards());
  ExperimentSummary summary;
  summary.directory = config.output_dir;
  const fs::path root(config.output_dir);
  fs::create_directories(root);

  json manifest;
  manifest["format_version"] = 1;
  manifest["config"] = config_to_json(config);
  manifest["scenario"] = toy::scenario_to_json(scenario);
  manifest["runs"] = json::array();

  const auto names = scenario.reward_names();
  for (auto seed : config.seeds) {
    Trainer trainer(config, scenario, seed);
    auto result = trainer.run();
    const fs::path dir = root / seed_dir_name(seed);
    fs::create_directories(dir);
    write_metrics(result.records, (dir / "metrics.jsonl").string());
    write_reward_curves(result.records, names, (dir / "reward_curves.csv").string());
    write_coefficient_curves(result.records, names, (dir / "coefficients.csv").string());
    if (result.last_advantages.rows() > 0) export_specialist_heatmap(result.last_advantages, (dir / "heatmap.csv").string());
    trainer.model().save((dir / "model.ckpt").string());
    manifest["runs"].push_back(run_summary_json(result));
    if (!result.failure.empty()) summary.ok = false;
    summary.runs.push_back(std::move(result));
  }
  manifest["status"] = summary.ok ? "ok" : "failed";
  write_json_file(root / "manifest.json", manifest);
  return summary;
}

// -- sweeps ----------------------------------------------------------------------------

enum class SweepAxis { kAmortizationInterval, kEmaDecay };

inline std::vector<double> default_sweep_values(SweepAxis axis) {
  if (axis == SweepAxis::kAmortizationInterval) return {5, 10, 20};
  return {0.1, 0.3, 0.5, 0.7, 0.9};
}

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "N" || s == "amortization_interval") return SweepAxis::kAmortizationInterval;
  if (s == "rho" || s == "ema_decay") return SweepAxis::kEmaDecay;
  throw ConfigError("sweep axis must be 'N' or 'rho', got '" + s + "'");
}

struct SweepCell {
  double value = 0.0;
  std::vector<double> final_rewards;   ///< averaged over seeds
  std::vector<double> reward_deltas;   ///< final - initial, averaged over seeds
  double mean_min_cos = 0.0;           ///< harmonized direction, over refresh steps and seeds
  double harmonized_conflict_rate = 0.0;
  double weighted_sum_conflict_rate = 0.0;
  std::int64_t qp_solves = 0;          ///< summed over seeds
  bool ok = true;
};

inline std::vector<SweepCell> run_sweep(const ExperimentConfig& base, SweepAxis axis, std::vector<double> values) {
  if (values.empty()) throw ConfigError("sweep: axis values must be nonempty");
  std::vector<SweepCell> cells;
  for (double v : values) {
    ExperimentConfig cfg = base;
    if (axis == SweepAxis::kAmortizationInterval) {
      cfg.harmonizer.amortization_interval = static_cast<int>(v);
      cfg.output_dir = (fs::path(base.output_dir) / ("N_" + std::to_string(static_cast<int>(v)))).string();
    } else {
      cfg.harmonizer.ema_decay = v;
      char buf[32];
      std::snprintf(buf, sizeof buf, "rho_%.2f", v);
      cfg.output_dir = (fs::path(base.output_dir) / buf).string();
    }
    const auto summary = run_experiment(cfg);
    SweepCell cell;
    cell.value = v;
    cell.ok = summary.ok;
    std::vector<HarmonyReport> harmonized, weighted;
    double min_cos_sum = 0.0;
    for (const auto& run : summary.runs) {
      if (!run.failure.empty()) continue;  // cell.ok is already false
      if (cell.final_rewards.empty()) {
        cell.final_rewards.assign(run.initial_rewards.size(), 0.0);
        cell.reward_deltas.assign(run.initial_rewards.size(), 0.0);
      }
      for (std::size_t k = 0; k < run.final_rewards.size(); ++k) {
        cell.final_rewards[k] += run.final_rewards[k] / static_cast<double>(summary.runs.size());
        cell.reward_deltas[k] +=
            (run.final_rewards[k] - run.initial_rewards[k]) / static_cast<double>(summary.runs.size());
      }
      cell.qp_solves += run.final_state.qp_solves;
      for (const auto& r : run.records) {
        if (r.harmony_harmonized) {
          harmonized.push_back(*r.harmony_harmonized);
          min_cos_sum += r.harmony_harmonized->min_cos;
        }
        if (r.harmony_weighted_sum) weighted.push_back(*r.harmony_weighted_sum);
      }
    }
    if (!harmonized.empty()) {
      cell.mean_min_cos = min_cos_sum / static_cast<double>(harmonized.size());
      cell.harmonized_conflict_rate = aggregate_conflict_rate(harmonized);
    }
    if (!weighted.empty()) cell.weighted_sum_conflict_rate = aggregate_conflict_rate(weighted);
    cells.push_back(std::move(cell));
  }
  return cells;
}

inline void write_sweep_csv(const std::vector<SweepCell>& cells, SweepAxis axis,
                            const std::vector<std::string>& reward_names, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("sweep: cannot open " + path);
  out << (axis == SweepAxis::kAmortizationInterval ? "N" : "rho");
  for (const auto& n : reward_names) out << ",final_" << n;
  for (const auto& n : reward_names) out << ",delta_" << n;
  out << ",mean_min_cos,harmonized_conflict_rate,weighted_sum_conflict_rate,qp_solves,status\n";
  for (const auto& c : cells) {
    out << marble::detail::csv_number(c.value);
    for (double v : c.final_rewards) out << ',' << marble::detail::csv_number(v);
    for (double v : c.reward_deltas) out << ',' << marble::detail::csv_number(v);
    out << ',' << marble::detail::csv_number(c.mean_min_cos) << ',' << marble::detail::csv_number(c.harmonized_conflict_rate) << ','
        << marble::detail::csv_number(c.weighted_sum_conflict_rate) << ',' << c.qp_solves << ',' << (c.ok ? "ok" : "failed") << '\n';
  }
}

}  // namespace marble::experiment
