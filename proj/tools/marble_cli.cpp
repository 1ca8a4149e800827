// SPDX-License-Identifier: Apache-2.0
//
// marble: experiment runner and self-check verbs.
//
// Exit codes: 0 success, 1 a check failed, 2 bad usage or config,
// 3 a training run aborted (partial artifacts are kept).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "marble/marble.hpp"

namespace fs = std::filesystem;
using namespace marble;

namespace {

struct CommonOptions {
  std::string config_path;
  std::string preset_name;
  std::string scenario;
  std::string output;
  std::string output_root;
  std::vector<std::uint64_t> seeds;
  int steps = -1;
  int threads = -1;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("-p,--preset", o.preset_name, "preset applied before --config overrides");
  cmd->add_option("--scenario", o.scenario, "'default' or a scenario JSON file");
  cmd->add_option("-o,--output", o.output, "output directory (relative paths resolve under the output root)");
  cmd->add_option("--output-root", o.output_root, "root for relative output directories")
      ->envname("MARBLE_OUTPUT_ROOT");
  cmd->add_option("--seeds", o.seeds, "seed list")->delimiter(',');
  cmd->add_option("--steps", o.steps, "training steps per seed");
  cmd->add_option("-j,--threads", o.threads, "worker threads for per-reward gradients")
      ->envname("MARBLE_THREADS")
      ->check(CLI::PositiveNumber);
}

experiment::ExperimentConfig resolve(const CommonOptions& o) {
  experiment::ExperimentConfig c;
  if (!o.preset_name.empty()) c = experiment::preset(o.preset_name);
  if (!o.config_path.empty()) {
    auto j = experiment::json::object();
    std::ifstream in(o.config_path);
    try {
      in >> j;
    } catch (const experiment::json::exception& e) {
      throw ConfigError("config " + o.config_path + ": " + e.what());
    }
    if (!o.preset_name.empty() && !j.contains("preset")) j["preset"] = o.preset_name;
    c = experiment::config_from_json(j);
  }
  if (!o.scenario.empty()) c.scenario = o.scenario;
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (o.steps >= 0) c.training.steps = o.steps;
  if (o.threads > 0) c.harmonizer.threads = o.threads;
  if (!o.output.empty()) c.output_dir = o.output;
  if (fs::path(c.output_dir).is_relative() && !o.output_root.empty())
    c.output_dir = (fs::path(o.output_root) / c.output_dir).string();
  return c;
}

int cmd_run(const CommonOptions& o) {
  const auto config = resolve(o);
  const auto summary = experiment::run_experiment(config);
  const auto names = experiment::resolve_scenario(config).reward_names();
  for (const auto& r : summary.runs) {
    std::printf("seed %llu: %d steps, qp_solves %lld", static_cast<unsigned long long>(r.seed), r.steps_completed,
                static_cast<long long>(r.final_state.qp_solves));
    for (std::size_t k = 0; k < names.size() && k < r.final_rewards.size(); ++k)
      std::printf(", %s %.4f -> %.4f", names[k].c_str(), r.initial_rewards[k], r.final_rewards[k]);
    std::printf("%s\n", r.failure.empty() ? "" : (" FAILED: " + r.failure).c_str());
  }
  std::printf("artifacts: %s\n", summary.directory.c_str());
  return summary.ok ? 0 : 3;
}

int cmd_sweep(const CommonOptions& o, const std::string& axis_name, std::vector<double> values) {
  const auto config = resolve(o);
  const auto axis = experiment::parse_axis(axis_name);
  if (values.empty()) values = experiment::default_sweep_values(axis);
  const auto cells = experiment::run_sweep(config, axis, values);
  fs::create_directories(config.output_dir);
  const auto csv = (fs::path(config.output_dir) / "sweep.csv").string();
  experiment::write_sweep_csv(cells, axis, experiment::resolve_scenario(config).reward_names(), csv);
  bool ok = true;
  for (const auto& c : cells) {
    std::printf("%s=%g  mean_min_cos %.4f  conflict harmonized %.3f weighted_sum %.3f%s\n", axis_name.c_str(),
                c.value, c.mean_min_cos, c.harmonized_conflict_rate, c.weighted_sum_conflict_rate,
                c.ok ? "" : "  FAILED");
    ok = ok && c.ok;
  }
  std::printf("summary: %s\n", csv.c_str());
  return ok ? 0 : 3;
}

int cmd_prop1(const checks::Prop1Options& opt) {
  const auto rep = checks::run_prop1_check(opt);
  std::printf("prop1: %d trials, max deviation %.3e (threshold %.1e)\n", rep.trials, rep.max_deviation,
              opt.tolerance);
  std::printf("prop1: one-hot max deviation %.3e\n", rep.one_hot_max_deviation);
  std::printf("prop1: %d clamped trials excluded, max deviation %.3e\n", rep.clamped_trials,
              rep.clamped_max_deviation);
  std::printf("prop1: %s\n", rep.passed ? "PASS" : "FAIL");
  return rep.passed ? 0 : 1;
}

int cmd_qp(const checks::QpCheckOptions& opt) {
  const auto rep = checks::run_qp_check(opt);
  std::printf("qp: %d instances (%d degenerate)\n", rep.instances, rep.degenerate);
  std::printf("qp: max |objective - grid| %.3e (threshold %.1e)\n", rep.max_grid_gap, opt.grid_tolerance);
  std::printf("qp: max |objective - closed form| %.3e (threshold %.1e)\n", rep.max_closed_form_gap,
              opt.closed_form_tolerance);
  std::printf("qp: min KKT margin %.3e, violations %d\n", rep.min_kkt_margin, rep.kkt_violations);
  std::printf("qp: %s\n", rep.passed ? "PASS" : "FAIL");
  return rep.passed ? 0 : 1;
}

int cmd_ddp(const CommonOptions& o, const std::vector<int>& world_sizes, bool parallel) {
  auto config = resolve(o);
  const auto scenario = experiment::resolve_scenario(config);
  const std::uint64_t seed = config.seeds.empty() ? 0 : config.seeds.front();
  experiment::Trainer trainer(config, scenario, seed);
  const auto p = trainer.prepare(0);
  const auto loss = config.harmonizer.loss_config();
  const auto full = per_reward_gradients(trainer.model(), p.batch, p.batch_advantages, loss);
  const auto reference = solve_full_harmonization(full, config.harmonizer);
  bool ok = true;
  for (int w : world_sizes) {
    const auto shards = ddp::shard_batch(p.batch, p.batch_advantages, w);
    const auto sync = ddp::simulate_sync_step(shards, trainer.model(), config.harmonizer, parallel);
    double grad_dev = 0.0;
    for (std::size_t k = 0; k < full.size(); ++k)
      grad_dev = std::max(grad_dev, vec::max_abs_diff(full[k], sync.averaged[k]));
    const double alpha_dev = vec::max_abs_diff(reference.alpha_star.values(), sync.rank_alpha.front().values());
    const bool pass = grad_dev <= 1e-12;
    ok = ok && pass;
    std::printf("world_size %d: max |avg g_k - full g_k| %.3e, |alpha - full alpha| %.3e, ranks agree: yes  %s\n",
                w, grad_dev, alpha_dev, pass ? "PASS" : "FAIL");
    if (w > 1) {
      const auto bad = ddp::simulate_premature_sync(shards, trainer.model(), config.harmonizer);
      double dev = 0.0;
      for (std::size_t k = 0; k < full.size(); ++k) dev = std::max(dev, vec::max_abs_diff(full[k], bad[k]));
      std::printf("world_size %d: premature averaging deviates by %.3e\n", w, dev);
    }
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"marble: multi-reward gradient harmonization on a 2-D flow-matching toy"};
  app.require_subcommand(1);
  app.footer("presets: marble_default, weighted_sum, fixed_alpha_uniform, per_step_solve, no_normalization,\n"
             "         uniform_consolidation, full_harmonization\n"
             "environment: MARBLE_OUTPUT_ROOT (output root), MARBLE_THREADS (thread count)");

  CommonOptions run_opts, sweep_opts, ddp_opts;
  auto* run = app.add_subcommand("run", "train every seed and write artifacts");
  add_common(run, run_opts);

  auto* sweep = app.add_subcommand("sweep", "sweep the amortization interval N or the EMA decay rho");
  add_common(sweep, sweep_opts);
  std::string axis = "N";
  std::vector<double> values;
  sweep->add_option("--axis", axis, "N or rho")->check(CLI::IsMember({"N", "rho"}));
  sweep->add_option("--values", values, "axis values (default grid: N 5,10,20; rho 0.1..0.9)")->delimiter(',');

  checks::Prop1Options prop1;
  auto* p1 = app.add_subcommand("check-prop1", "randomized combined-advantage equivalence suite");
  p1->add_option("--trials", prop1.trials, "unclamped trials")->check(CLI::PositiveNumber);
  p1->add_option("--seed", prop1.seed, "suite seed");
  p1->add_option("--tolerance", prop1.tolerance, "max elementwise deviation");

  checks::QpCheckOptions qpo;
  auto* qpc = app.add_subcommand("check-qp", "min-norm solver vs grid search and the K=2 closed form");
  qpc->add_option("--instances", qpo.instances, "random instances")->check(CLI::PositiveNumber);
  qpc->add_option("--seed", qpo.seed, "suite seed");

  auto* ddp = app.add_subcommand("ddp-sim", "simulated multi-worker gradient synchronization");
  add_common(ddp, ddp_opts);
  std::vector<int> world_sizes = {1, 2, 4};
  bool parallel = false;
  ddp->add_option("--world-sizes", world_sizes, "world sizes to simulate")->delimiter(',');
  ddp->add_flag("--parallel", parallel, "run ranks on separate threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(run_opts);
    if (*sweep) return cmd_sweep(sweep_opts, axis, values);
    if (*p1) return cmd_prop1(prop1);
    if (*qpc) return cmd_qp(qpo);
    if (*ddp) return cmd_ddp(ddp_opts, world_sizes, parallel);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
