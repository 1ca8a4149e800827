// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale rollout environment: a conditional 2-D generation task whose
// synthetic rewards are built to conflict. Two distance rewards pull toward
// opposite targets; a sparse region reward produces specialist samples that
// only one reward column cares about.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marble/advantage.hpp"
#include "marble/nft.hpp"
#include "marble/types.hpp"
#include "marble/velocity_model.hpp"

namespace marble::toy {

inline constexpr std::size_t kStateDim = 2;

/// splitmix64 finalizer; derives independent stream seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum class RewardKind { kGeneralDistance, kSpecialistRegion, kSpecialistParity };

inline const char* to_string(RewardKind k) {
  switch (k) {
    case RewardKind::kGeneralDistance: return "general_distance";
    case RewardKind::kSpecialistRegion: return "specialist_region";
    case RewardKind::kSpecialistParity: return "specialist_parity";
  }
  return "unknown";
}

struct RewardSpec {
  std::string name;
  RewardKind kind = RewardKind::kGeneralDistance;
  std::vector<double> target = {0.0, 0.0};  ///< general_distance
  double x_min = -std::numeric_limits<double>::infinity();  ///< specialist_region bounds
  double x_max = std::numeric_limits<double>::infinity();
  double y_min = -std::numeric_limits<double>::infinity();
  double y_max = std::numeric_limits<double>::infinity();
  int axis = 0;        ///< specialist_parity coordinate
  double sign = 1.0;   ///< specialist_parity orientation

  /// general_distance: -||x - target||; specialist_region: 1 inside else 0;
  /// specialist_parity: 1 if sign * x[axis] > 0 else 0.
  double evaluate(std::span<const double> x) const {
    switch (kind) {
      case RewardKind::kGeneralDistance: {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - target[i]) * (x[i] - target[i]);
        return -std::sqrt(s);
      }
      case RewardKind::kSpecialistRegion:
        return (x[0] > x_min && x[0] < x_max && x[1] > y_min && x[1] < y_max) ? 1.0 : 0.0;
      case RewardKind::kSpecialistParity:
        return sign * x[static_cast<std::size_t>(axis)] > 0.0 ? 1.0 : 0.0;
    }
    return 0.0;
  }
};

/// One condition class. Rewards for class c are evaluated at x_1 - shift.
struct PromptClass {
  int id = 0;
  std::string name;
  std::vector<double> shift = {0.0, 0.0};
};

struct Scenario {
  int version = 1;
  std::string name = "conflict3";
  std::vector<RewardSpec> rewards;
  std::vector<PromptClass> prompts;

  std::size_t num_rewards() const noexcept { return rewards.size(); }
  std::vector<int> prompt_ids() const {
    std::vector<int> ids;
    for (const auto& p : prompts) ids.push_back(p.id);
    return ids;
  }
  std::vector<std::string> reward_names() const {
    std::vector<std::string> n;
    for (const auto& r : rewards) n.push_back(r.name);
    return n;
  }
  const PromptClass& prompt(int id) const {
    for (const auto& p : prompts)
      if (p.id == id) return p;
    throw LookupError("scenario: unknown prompt id " + std::to_string(id));
  }
};

/// Two opposing distance rewards with targets (+-1, 0) and a sparse region
/// reward on x > 0.8, |y| < 0.2; four prompt classes shifted along y.
inline Scenario default_scenario() {
  Scenario s;
  s.name = "conflict3";
  RewardSpec right{.name = "dist_right", .kind = RewardKind::kGeneralDistance, .target = {1.0, 0.0}};
  RewardSpec left{.name = "dist_left", .kind = RewardKind::kGeneralDistance, .target = {-1.0, 0.0}};
  RewardSpec region{.name = "region", .kind = RewardKind::kSpecialistRegion};
  region.x_min = 0.8;
  region.y_min = -0.2;
  region.y_max = 0.2;
  s.rewards = {right, left, region};
  const double shifts[] = {0.0, 0.25, -0.25, 0.5};
  for (int c = 0; c < 4; ++c) s.prompts.push_back({c, "class" + std::to_string(c), {0.0, shifts[c]}});
  return s;
}

// -- scenario file (JSON) ---------------------------------------------------------

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                           const std::string& path) {
  if (!obj.is_object()) throw ConfigError(path + ": expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(path + "." + it.key() + ": unknown key");
  }
}

inline double bound_or(const nlohmann::json& j, const char* key, double fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  return j[key].get<double>();
}

inline nlohmann::json bound_json(double v) {
  if (std::isinf(v)) return nullptr;
  return v;
}

}  // namespace detail

inline Scenario scenario_from_json(const nlohmann::json& j) {
  using detail::reject_unknown;
  reject_unknown(j, {"version", "name", "rewards", "prompts"}, "scenario");
  Scenario s;
  try {
    s.version = j.value("version", 1);
    if (s.version != 1) throw ConfigError("scenario.version: unsupported version " + std::to_string(s.version));
    s.name = j.value("name", std::string("scenario"));
    if (!j.contains("rewards") || !j["rewards"].is_array() || j["rewards"].empty())
      throw ConfigError("scenario.rewards: must be a nonempty array");
    for (std::size_t i = 0; i < j["rewards"].size(); ++i) {
      const auto& r = j["rewards"][i];
      const std::string path = "scenario.rewards[" + std::to_string(i) + "]";
      reject_unknown(r, {"name", "kind", "target", "x_min", "x_max", "y_min", "y_max", "axis", "sign"}, path);
      RewardSpec spec;
      spec.name = r.value("name", "R" + std::to_string(i + 1));
      const std::string kind = r.at("kind").get<std::string>();
      if (kind == "general_distance") {
        spec.kind = RewardKind::kGeneralDistance;
        spec.target = r.at("target").get<std::vector<double>>();
        if (spec.target.size() != kStateDim) throw ConfigError(path + ".target: expected 2 coordinates");
      } else if (kind == "specialist_region") {
        spec.kind = RewardKind::kSpecialistRegion;
        spec.x_min = detail::bound_or(r, "x_min", spec.x_min);
        spec.x_max = detail::bound_or(r, "x_max", spec.x_max);
        spec.y_min = detail::bound_or(r, "y_min", spec.y_min);
        spec.y_max = detail::bound_or(r, "y_max", spec.y_max);
      } else if (kind == "specialist_parity") {
        spec.kind = RewardKind::kSpecialistParity;
        spec.axis = r.value("axis", 0);
        spec.sign = r.value("sign", 1.0);
        if (spec.axis < 0 || spec.axis >= static_cast<int>(kStateDim)) throw ConfigError(path + ".axis: must be 0 or 1");
      } else {
        throw ConfigError(path + ".kind: unknown reward kind '" + kind + "'");
      }
      s.rewards.push_back(std::move(spec));
    }
    if (!j.contains("prompts") || !j["prompts"].is_array() || j["prompts"].empty())
      throw ConfigError("scenario.prompts: must be a nonempty array");
    std::set<int> seen;
    for (std::size_t i = 0; i < j["prompts"].size(); ++i) {
      const auto& p = j["prompts"][i];
      const std::string path = "scenario.prompts[" + std::to_string(i) + "]";
      reject_unknown(p, {"id", "name", "shift"}, path);
      PromptClass pc;
      pc.id = p.at("id").get<int>();
      pc.name = p.value("name", "class" + std::to_string(pc.id));
      pc.shift = p.value("shift", std::vector<double>{0.0, 0.0});
      if (pc.shift.size() != kStateDim) throw ConfigError(path + ".shift: expected 2 coordinates");
      if (!seen.insert(pc.id).second) throw ConfigError(path + ".id: duplicate prompt id");
      s.prompts.push_back(std::move(pc));
    }
    // Condition ids index the model's one-hot input, so they must be 0..C-1.
    int expected = 0;
    for (int id : seen)
      if (id != expected++) throw ConfigError("scenario.prompts: ids must be 0..C-1");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  return s;
}

inline nlohmann::json scenario_to_json(const Scenario& s) {
  nlohmann::json j;
  j["version"] = s.version;
  j["name"] = s.name;
  j["rewards"] = nlohmann::json::array();
  for (const auto& r : s.rewards) {
    nlohmann::json rj;
    rj["name"] = r.name;
    rj["kind"] = to_string(r.kind);
    switch (r.kind) {
      case RewardKind::kGeneralDistance: rj["target"] = r.target; break;
      case RewardKind::kSpecialistRegion:
        rj["x_min"] = detail::bound_json(r.x_min);
        rj["x_max"] = detail::bound_json(r.x_max);
        rj["y_min"] = detail::bound_json(r.y_min);
        rj["y_max"] = detail::bound_json(r.y_max);
        break;
      case RewardKind::kSpecialistParity:
        rj["axis"] = r.axis;
        rj["sign"] = r.sign;
        break;
    }
    j["rewards"].push_back(rj);
  }
  j["prompts"] = nlohmann::json::array();
  for (const auto& p : s.prompts) j["prompts"].push_back({{"id", p.id}, {"name", p.name}, {"shift", p.shift}});
  return j;
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("scenario: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("scenario " + path + ": " + e.what());
  }
  return scenario_from_json(j);
}

// -- rollouts -----------------------------------------------------------------------

struct RolloutElement {
  std::uint64_t sample_id = 0;
  int prompt_id = 0;
  std::vector<double> x0;
  std::vector<double> x1;
  int ode_steps = 0;
  std::uint64_t seed = 0;
};

struct RolloutBatch {
  std::vector<RolloutElement> elements;
  std::size_t size() const noexcept { return elements.size(); }
};

/// Euler integration of dx/dt = v_theta(x, t, c) from x_0 ~ N(0, I) over
/// t in [0, 1]. Sample i draws its noise from mix_seed(seed, i).
inline RolloutBatch sample_rollouts(const VelocityModel& model, std::span<const int> prompts, int group_size,
                                    int ode_steps, std::uint64_t seed) {
  if (ode_steps < 1) throw ParameterError("sample_rollouts: ode_steps must be >= 1");
  if (group_size < 2) throw ParameterError("sample_rollouts: group_size must be >= 2");
  if (model.shape().state_dim != kStateDim) throw DimensionError("sample_rollouts: toy env is 2-D");
  RolloutBatch batch;
  const double dt = 1.0 / ode_steps;
  std::uint64_t index = 0;
  for (int prompt : prompts) {
    for (int g = 0; g < group_size; ++g, ++index) {
      RolloutElement e;
      e.sample_id = index;
      e.prompt_id = prompt;
      e.ode_steps = ode_steps;
      e.seed = mix_seed(seed, index);
      std::mt19937_64 rng(e.seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      e.x0 = {normal(rng), normal(rng)};
      std::vector<double> x = e.x0;
      ForwardCache cache;
      for (int s = 0; s < ode_steps; ++s) {
        const auto v = model.forward(x, s * dt, prompt, cache);
        for (std::size_t j = 0; j < kStateDim; ++j) x[j] += dt * v[j];
        if (!(vec::norm(x) <= 1e6)) throw DivergenceError("sample_rollouts: trajectory diverged");
      }
      e.x1 = std::move(x);
      batch.elements.push_back(std::move(e));
    }
  }
  return batch;
}

inline std::vector<RewardSample> evaluate_rewards(const RolloutBatch& batch, const Scenario& scenario) {
  if (scenario.rewards.empty()) throw EmptyInputError("evaluate_rewards: no reward specs");
  std::vector<RewardSample> out;
  out.reserve(batch.size());
  for (const auto& e : batch.elements) {
    const auto& shift = scenario.prompt(e.prompt_id).shift;
    const double local[2] = {e.x1[0] - shift[0], e.x1[1] - shift[1]};
    RewardSample s;
    s.sample_id = e.sample_id;
    s.prompt_id = e.prompt_id;
    for (const auto& spec : scenario.rewards) s.rewards.push_back(spec.evaluate(local));
    out.push_back(std::move(s));
  }
  return out;
}

struct TimestepRange {
  double lo = 0.05;
  double hi = 0.95;
};

/// Training pairs on the straight path x_t = (1 - t) x0' + t x1 with fresh
/// noise x0', target v = x1 - x0', and v_old from the rollout-time snapshot.
/// Elements are ordered sample-major: all timesteps of sample 0, then 1, ...
inline NftBatch build_training_batch(const RolloutBatch& rollouts, int timesteps_per_sample, std::uint64_t seed,
                                     const VelocityModel& snapshot, TimestepRange range = {}) {
  if (timesteps_per_sample < 1) throw ParameterError("build_training_batch: timesteps_per_sample must be >= 1");
  if (!(range.lo > 0.0 && range.hi < 1.0 && range.lo <= range.hi))
    throw ParameterError("build_training_batch: timestep range must lie inside (0,1)");
  NftBatch batch;
  batch.dim = kStateDim;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const auto& e = rollouts.elements[i];
    std::mt19937_64 rng(mix_seed(seed, i));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(range.lo, range.hi);
    for (int s = 0; s < timesteps_per_sample; ++s) {
      const double noise[2] = {normal(rng), normal(rng)};
      const double t = range.lo == range.hi ? range.lo : uni(rng);
      double x_t[2], v[2];
      for (std::size_t j = 0; j < kStateDim; ++j) {
        x_t[j] = (1.0 - t) * noise[j] + t * e.x1[j];
        v[j] = e.x1[j] - noise[j];
      }
      const auto v_old = snapshot.forward(x_t, t, e.prompt_id);
      batch.push_back(x_t, t, v, v_old, e.prompt_id);
    }
  }
  return batch;
}

}  // namespace marble::toy
