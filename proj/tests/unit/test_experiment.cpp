// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>

#include "helpers.hpp"

using namespace marble;
using namespace marble::experiment;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("marble_exp_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig quick(const std::string& preset_name, const std::string& dir, int steps = 12) {
  auto c = preset(preset_name);
  c.training.steps = steps;
  c.training.group_size = 8;
  c.training.eval_group_size = 16;
  c.training.ode_steps = 8;
  c.seeds = {3};
  c.output_dir = fresh_dir(dir).string();
  return c;
}

}  // namespace

TEST_CASE("presets", "[experiment]") {
  REQUIRE(preset_names().size() == 7);
  for (const auto& n : preset_names()) REQUIRE(preset(n).preset == n);
  const auto d = preset("marble_default");
  REQUIRE(d.harmonizer.mode == HarmonizerMode::kAmortized);
  REQUIRE(d.harmonizer.amortization_interval == 10);
  REQUIRE(d.harmonizer.ema_decay == 0.7);
  const auto p = preset("per_step_solve");
  REQUIRE(p.harmonizer.amortization_interval == 1);
  REQUIRE(p.harmonizer.ema_decay == 0.0);
  REQUIRE_FALSE(preset("no_normalization").harmonizer.normalize_gradients);
  REQUIRE(preset("uniform_consolidation").harmonizer.uniform_after_step == 400);
  REQUIRE(preset("weighted_sum").harmonizer.mode == HarmonizerMode::kWeightedSum);
  const auto f = preset("fixed_alpha_uniform");
  Harmonizer h(f.harmonizer, 3);
  for (std::size_t k = 0; k < 3; ++k) REQUIRE(h.static_weights()[k] == 1.0 / 3.0);
  REQUIRE_THROWS_AS(preset("unknown"), ConfigError);
}

TEST_CASE("config documents", "[experiment]") {
  using nlohmann::json;
  const auto c = config_from_json(json{{"preset", "weighted_sum"},
                                       {"harmonizer", {{"learning_rate", 0.05}}},
                                       {"training", {{"steps", 7}, {"stats_mode", "running"}}},
                                       {"seeds", {1, 2}}});
  REQUIRE(c.harmonizer.mode == HarmonizerMode::kWeightedSum);
  REQUIRE(c.harmonizer.learning_rate == 0.05);
  REQUIRE(c.training.steps == 7);
  REQUIRE(c.training.stats_mode == StatsMode::kRunning);
  REQUIRE(c.seeds == std::vector<std::uint64_t>{1, 2});
  REQUIRE(config_to_json(config_from_json(config_to_json(c))) == config_to_json(c));

  REQUIRE_THROWS_WITH(config_from_json(json{{"harmonizer", {{"ema_decya", 0.5}}}}),
                      ContainsSubstring("harmonizer.ema_decya"));
  REQUIRE_THROWS_WITH(config_from_json(json{{"training", {{"steps", "ten"}}}}),
                      ContainsSubstring("training.steps"));
  REQUIRE_THROWS_WITH(config_from_json(json{{"model", {{"depth", 3}}}}), ContainsSubstring("model.depth"));
  REQUIRE_THROWS_WITH(config_from_json(json{{"extra", 1}}), ContainsSubstring("extra"));
  REQUIRE_THROWS_AS(config_from_json(json{{"harmonizer", {{"fixed_alpha", {0.5, 0.6}}}}}), ConfigError);
  REQUIRE_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);

  auto bad = preset("marble_default");
  bad.training.group_size = 1;
  REQUIRE_THROWS_AS(validate(bad, 3), ConfigError);
  bad = preset("marble_default");
  bad.scenario = "/nonexistent/scenario.json";
  REQUIRE_THROWS_AS(resolve_scenario(bad), ConfigError);
}

TEST_CASE("runs are deterministic per seed", "[experiment]") {
  auto a = quick("marble_default", "det_a");
  auto b = quick("marble_default", "det_b");
  const auto ra = run_experiment(a);
  const auto rb = run_experiment(b);
  REQUIRE(ra.ok);
  for (const char* f : {"metrics.jsonl", "reward_curves.csv", "coefficients.csv", "heatmap.csv", "model.ckpt"}) {
    const auto fa = testutil::read_file((fs::path(a.output_dir) / "seed_3" / f).string());
    REQUIRE_FALSE(fa.empty());
    REQUIRE(fa == testutil::read_file((fs::path(b.output_dir) / "seed_3" / f).string()));
  }
  const auto records = read_metrics((fs::path(a.output_dir) / "seed_3" / "metrics.jsonl").string());
  REQUIRE(records.size() == 12);
  REQUIRE(records[0].refreshed);
  REQUIRE_FALSE(records[1].refreshed);
  REQUIRE(records[10].refreshed);

  SECTION("the manifest reruns the experiment") {
    std::ifstream in(fs::path(a.output_dir) / "manifest.json");
    const auto m = nlohmann::json::parse(in);
    REQUIRE(m["status"] == "ok");
    REQUIRE(m["runs"][0]["seed"] == 3);
    auto again = config_from_json(m["config"]);
    again.output_dir = fresh_dir("det_c").string();
    run_experiment(again);
    REQUIRE(testutil::read_file((fs::path(again.output_dir) / "seed_3" / "metrics.jsonl").string()) ==
            testutil::read_file((fs::path(a.output_dir) / "seed_3" / "metrics.jsonl").string()));
  }
  SECTION("a different seed differs") {
    auto c = quick("marble_default", "det_d");
    c.seeds = {4};
    run_experiment(c);
    REQUIRE(testutil::read_file((fs::path(c.output_dir) / "seed_4" / "model.ckpt").string()) !=
            testutil::read_file((fs::path(a.output_dir) / "seed_3" / "model.ckpt").string()));
  }
}

TEST_CASE("amortized accounting over 100 steps", "[experiment]") {
  auto c = quick("marble_default", "acct", 100);
  Trainer tr(c, toy::default_scenario(), 0);
  const auto res = tr.run();
  REQUIRE(res.failure.empty());
  REQUIRE(res.final_state.qp_solves == 10);
  REQUIRE(res.steps_completed == 100);
  std::int64_t refreshed = 0;
  for (const auto& r : res.records) {
    refreshed += r.refreshed ? 1 : 0;
    REQUIRE(on_simplex(r.alpha_ema));
  }
  REQUIRE(refreshed == 10);
  if (res.final_state.clamp_activation_count == 0) REQUIRE(res.final_state.pareto_fallback_used == 0);
}

TEST_CASE("every mode runs", "[experiment]") {
  for (const auto& n : preset_names()) {
    auto c = quick(n, "mode_" + n, 6);
    if (n == "uniform_consolidation") c.harmonizer.uniform_after_step = 3;
    Trainer tr(c, toy::default_scenario(), 1);
    const auto res = tr.run();
    INFO(n);
    REQUIRE(res.failure.empty());
    REQUIRE(res.final_rewards.size() == 3);
  }
  SECTION("scalarized weighted sum") {
    auto c = quick("weighted_sum", "mode_scalar", 4);
    c.harmonizer.scalarize_rewards = true;
    Trainer tr(c, toy::default_scenario(), 1);
    REQUIRE(tr.run().failure.empty());
  }
}

TEST_CASE("numeric failure leaves a failure manifest", "[experiment]") {
  auto c = quick("marble_default", "fail", 5);
  c.model.output_scale = 1e12;
  c.training.ode_steps = 1;
  const auto s = run_experiment(c);
  REQUIRE_FALSE(s.ok);
  std::ifstream in(fs::path(c.output_dir) / "manifest.json");
  const auto m = nlohmann::json::parse(in);
  REQUIRE(m["status"] == "failed");
  REQUIRE(m["runs"][0]["failure"].is_string());
  REQUIRE(fs::exists(fs::path(c.output_dir) / "seed_3" / "metrics.jsonl"));
}

TEST_CASE("sweeps", "[experiment]") {
  REQUIRE(default_sweep_values(SweepAxis::kAmortizationInterval) == std::vector<double>{5, 10, 20});
  REQUIRE(default_sweep_values(SweepAxis::kEmaDecay) == std::vector<double>{0.1, 0.3, 0.5, 0.7, 0.9});
  REQUIRE(parse_axis("rho") == SweepAxis::kEmaDecay);
  REQUIRE_THROWS_AS(parse_axis("lr"), ConfigError);
  auto base = quick("marble_default", "sweep");
  REQUIRE_THROWS_AS(run_sweep(base, SweepAxis::kEmaDecay, {}), ConfigError);

  const auto cells = run_sweep(base, SweepAxis::kAmortizationInterval, {10});
  REQUIRE(cells.size() == 1);
  auto single = base;
  single.output_dir = fresh_dir("sweep_single").string();
  const auto direct = run_experiment(single);
  REQUIRE(cells[0].final_rewards == direct.runs[0].final_rewards);
  REQUIRE(cells[0].qp_solves == direct.runs[0].final_state.qp_solves);
  REQUIRE(testutil::read_file((fs::path(base.output_dir) / "N_10" / "seed_3" / "metrics.jsonl").string()) ==
          testutil::read_file((fs::path(single.output_dir) / "seed_3" / "metrics.jsonl").string()));

  const auto csv = (fs::path(base.output_dir) / "sweep.csv").string();
  write_sweep_csv(cells, SweepAxis::kAmortizationInterval, {"a", "b", "c"}, csv);
  const auto text = testutil::read_file(csv);
  REQUIRE(text.rfind("N,final_a,final_b,final_c,delta_a,delta_b,delta_c,mean_min_cos,", 0) == 0);
  REQUIRE(text.find("\n10,") != std::string::npos);
}

TEST_CASE("shipped examples load", "[experiment]") {
  const fs::path root(MARBLE_SOURCE_DIR);
  for (const char* f : {"marble_default.json", "weighted_sum.json", "ablation_no_normalization.json", "full.json"}) {
    INFO(f);
    const auto c = load_config((root / "examples" / "configs" / f).string());
    REQUIRE_NOTHROW(validate(c, 3));
  }
  const auto full = load_config((root / "examples" / "configs" / "full.json").string());
  REQUIRE(config_to_json(full)["harmonizer"] == config_to_json(preset("marble_default"))["harmonizer"]);
  const auto conflict = toy::load_scenario((root / "examples" / "scenarios" / "conflict3.json").string());
  REQUIRE(toy::scenario_to_json(conflict) == toy::scenario_to_json(toy::default_scenario()));
  const auto parity = toy::load_scenario((root / "examples" / "scenarios" / "parity4.json").string());
  REQUIRE(parity.num_rewards() == 4);
  REQUIRE_THROWS_AS(load_config((root / "tests" / "data" / "bad_key.json").string()), ConfigError);
}
