// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>

#include "helpers.hpp"

using namespace marble;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("marble_diag_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

StepRecord sample_record(std::int64_t step, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  StepRecord r;
  r.step = step;
  r.mode = "amortized";
  r.refreshed = step % 10 == 0;
  r.alpha_star = {0.25, 0.5, 0.25};
  r.alpha_ema = {1 / 3.0, 1 / 3.0, 1 / 3.0};
  r.mean_norm = r.refreshed ? 0.125 + u(rng) * 0.01 : 0.0;
  if (r.refreshed) r.grad_norms = std::vector<double>{u(rng) + 2, u(rng) + 2, u(rng) + 2};
  r.reward_means = {u(rng), u(rng), u(rng)};
  r.counters = {step / 10 + 1, step % 3, 0, 0, step % 2};
  if (r.refreshed) {
    const std::vector<GradientVector> g = {{1, 0}, {-0.9, 0.1}};
    r.harmony_harmonized = harmony_stats(std::vector<double>{0.05, 0.5}, g);
    r.harmony_weighted_sum = harmony_stats(std::vector<double>{0.05, 0.05}, g);
  }
  return r;
}

}  // namespace

TEST_CASE("harmony statistics", "[diagnostics]") {
  const std::vector<GradientVector> g = {{1.0, 0.0}, {-0.9, 0.1}};
  const std::vector<double> d = {0.05, 0.05};
  const auto h = harmony_stats(d, g);
  REQUIRE_THAT(h.cosines[0], WithinAbs(std::sqrt(0.5), 1e-15));
  REQUIRE_THAT(h.cosines[1], WithinAbs((-0.045 + 0.005) / (std::sqrt(0.005) * std::sqrt(0.82)), 1e-14));
  REQUIRE(h.conflict);
  REQUIRE(h.min_cos == h.cosines[1]);
  REQUIRE_THAT(h.mean_cos, WithinAbs(0.5 * (h.cosines[0] + h.cosines[1]), 1e-15));
  REQUIRE_THAT(h.var_cos, WithinAbs(0.25 * std::pow(h.cosines[0] - h.cosines[1], 2), 1e-15));

  const auto aligned = harmony_stats(std::vector<double>{2.0, 0.0}, std::vector<GradientVector>{{1.0, 0.0}});
  REQUIRE(aligned.cosines[0] == 1.0);
  REQUIRE(aligned.var_cos == 0.0);
  REQUIRE_FALSE(aligned.conflict);

  const auto zero = harmony_stats(std::vector<double>{1.0, 0.0}, std::vector<GradientVector>{{0.0, 0.0}, {0.0, 1.0}});
  REQUIRE(zero.zero_flag == std::vector<bool>{true, false});
  REQUIRE(zero.cosines[0] == 0.0);
  REQUIRE_THROWS_AS(harmony_stats(d, std::vector<GradientVector>{}), EmptyInputError);
  REQUIRE_THROWS_AS(harmony_stats(d, std::vector<GradientVector>{{1.0}}), DimensionError);

  std::mt19937_64 rng(81);
  for (int t = 0; t < 200; ++t) {
    const auto gs = testutil::random_unit_vectors(rng, 1 + rng() % 5, 4);
    const auto dir = testutil::random_unit_vectors(rng, 1, 4).front();
    const auto r = harmony_stats(dir, gs);
    REQUIRE(r.min_cos <= r.mean_cos);
    REQUIRE(r.var_cos >= 0.0);
    for (double c : r.cosines) REQUIRE(std::abs(c) <= 1.0);
  }
}

TEST_CASE("conflict rate", "[diagnostics]") {
  std::vector<HarmonyReport> reps(5);
  for (int i = 0; i < 4; ++i) reps[i].conflict = true;
  REQUIRE_THAT(aggregate_conflict_rate(reps), WithinAbs(0.8, 1e-15));
  auto twice = reps;
  twice.insert(twice.end(), reps.begin(), reps.end());
  REQUIRE(aggregate_conflict_rate(twice) == aggregate_conflict_rate(reps));
  REQUIRE_THROWS_AS(aggregate_conflict_rate(std::vector<HarmonyReport>{}), EmptyInputError);
}

TEST_CASE("metrics streams", "[diagnostics]") {
  const auto dir = temp_dir("metrics");
  SECTION("no records give an empty file") {
    write_metrics(std::vector<StepRecord>{}, (dir / "empty.jsonl").string());
    REQUIRE(fs::exists(dir / "empty.jsonl"));
    REQUIRE(fs::file_size(dir / "empty.jsonl") == 0);
  }
  SECTION("round trip of 100 records") {
    std::mt19937_64 rng(82);
    std::vector<StepRecord> recs;
    for (int s = 0; s < 100; ++s) recs.push_back(sample_record(s, rng));
    const auto path = (dir / "m.jsonl").string();
    write_metrics(recs, path);
    const auto back = read_metrics(path);
    REQUIRE(back.size() == 100);
    for (std::size_t i = 0; i < 100; ++i) {
      REQUIRE(back[i].step == recs[i].step);
      REQUIRE(back[i].refreshed == recs[i].refreshed);
      REQUIRE(back[i].alpha_ema == recs[i].alpha_ema);
      REQUIRE(back[i].reward_means == recs[i].reward_means);
      REQUIRE(back[i].grad_norms == recs[i].grad_norms);
      REQUIRE(back[i].counters == recs[i].counters);
      REQUIRE(back[i].harmony_harmonized.has_value() == recs[i].harmony_harmonized.has_value());
      if (recs[i].harmony_weighted_sum)
        REQUIRE(back[i].harmony_weighted_sum->cosines == recs[i].harmony_weighted_sum->cosines);
    }
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "mode", "refreshed", "alpha_star", "alpha_ema", "mean_norm", "grad_norms",
                            "reward_means", "counters", "harmony", "window"})
      REQUIRE(j.contains(key));
    REQUIRE(j["harmony"]["weighted_sum"]["conflict"] == true);
  }
  SECTION("CSV curves") {
    std::mt19937_64 rng(83);
    std::vector<StepRecord> recs = {sample_record(0, rng), sample_record(1, rng)};
    const std::vector<std::string> names = {"a", "b", "c"};
    write_reward_curves(recs, names, (dir / "r.csv").string());
    write_coefficient_curves(recs, names, (dir / "c.csv").string());
    const auto r = testutil::read_file((dir / "r.csv").string());
    const auto c = testutil::read_file((dir / "c.csv").string());
    REQUIRE(r.rfind("step,a,b,c\n0,", 0) == 0);
    REQUIRE(std::count(r.begin(), r.end(), '\n') == 3);
    REQUIRE(c.rfind("step,alpha_ema_a,alpha_ema_b,alpha_ema_c,alpha_star_a,alpha_star_b,alpha_star_c,"
                    "pareto_fallback_used\n0,0.3333333333,0.3333333333,0.3333333333,0.25,0.5,0.25,0\n",
                    0) == 0);
  }
  SECTION("unwritable path") {
    REQUIRE_THROWS_AS(MetricsWriter((dir / "missing" / "x.jsonl").string()), IoError);
    REQUIRE_THROWS_AS(read_metrics((dir / "missing.jsonl").string()), IoError);
  }
}
