// SPDX-License-Identifier: Apache-2.0
//
// Update-direction harmony statistics and the per-step metrics streams.
//
// JSONL record fields (one object per line, fixed names):
//   step                    int     0-based training step
//   mode                    string  harmonizer mode actually used this step
//   refreshed               bool    all K per-reward gradients were computed
//   alpha_star              [K]     most recently solved QP coefficients
//   alpha_ema               [K]     coefficients applied this step
//   mean_norm               float   mean raw per-reward gradient norm (0 if not computed)
//   grad_norms              [K]|null  per-reward gradient norms on refresh steps
//   reward_means            [K]     mean raw reward of this step's rollouts
//   counters                object  qp_solves, clamp_activation_count,
//                                   pareto_fallback_used, degenerate_qp_count,
//                                   zero_signal_count
//   harmony                 object|null  {"harmonized": H, "weighted_sum": H}
//                                   with H = {cosines, min_cos, mean_cos, var_cos, conflict}
//   window                  int     steps covered by the record (always 1)
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marble/types.hpp"

namespace marble {

struct HarmonyReport {
  std::vector<double> cosines;
  std::vector<bool> zero_flag;  ///< direction or g_k had zero norm; cosine reported as 0
  double min_cos = 0.0;
  double mean_cos = 0.0;
  double var_cos = 0.0;  ///< population variance over K
  bool conflict = false;  ///< min_cos < 0
};

inline HarmonyReport harmony_stats(std::span<const double> direction, std::span<const GradientVector> gradients) {
  if (gradients.empty()) throw EmptyInputError("harmony_stats: no gradients");
  HarmonyReport rep;
  const double dn = vec::norm(direction);
  for (const auto& g : gradients) {
    vec::require_same_size(g.size(), direction.size(), "harmony_stats");
    const double gn = vec::norm(g);
    if (dn == 0.0 || gn == 0.0) {
      rep.cosines.push_back(0.0);
      rep.zero_flag.push_back(true);
    } else {
      rep.cosines.push_back(std::clamp(vec::dot(direction, g) / (dn * gn), -1.0, 1.0));
      rep.zero_flag.push_back(false);
    }
  }
  const double k = static_cast<double>(rep.cosines.size());
  rep.min_cos = *std::min_element(rep.cosines.begin(), rep.cosines.end());
  for (double c : rep.cosines) rep.mean_cos += c;
  rep.mean_cos /= k;
  for (double c : rep.cosines) rep.var_cos += (c - rep.mean_cos) * (c - rep.mean_cos);
  rep.var_cos /= k;
  rep.conflict = rep.min_cos < 0.0;
  return rep;
}

inline double aggregate_conflict_rate(std::span<const HarmonyReport> reports) {
  if (reports.empty()) throw EmptyInputError("aggregate_conflict_rate: no reports");
  std::size_t n = 0;
  for (const auto& r : reports) n += r.conflict ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(reports.size());
}

inline nlohmann::json to_json(const HarmonyReport& r) {
  return {{"cosines", r.cosines}, {"min_cos", r.min_cos}, {"mean_cos", r.mean_cos},
          {"var_cos", r.var_cos}, {"conflict", r.conflict}};
}

inline HarmonyReport harmony_from_json(const nlohmann::json& j) {
  HarmonyReport r;
  r.cosines = j.at("cosines").get<std::vector<double>>();
  r.zero_flag.assign(r.cosines.size(), false);
  r.min_cos = j.at("min_cos").get<double>();
  r.mean_cos = j.at("mean_cos").get<double>();
  r.var_cos = j.at("var_cos").get<double>();
  r.conflict = j.at("conflict").get<bool>();
  return r;
}

struct StepCounters {
  std::int64_t qp_solves = 0;
  std::int64_t clamp_activation_count = 0;
  std::int64_t pareto_fallback_used = 0;
  std::int64_t degenerate_qp_count = 0;
  std::int64_t zero_signal_count = 0;
  friend bool operator==(const StepCounters&, const StepCounters&) = default;
};

struct StepRecord {
  std::int64_t step = 0;
  std::string mode;
  bool refreshed = false;
  std::vector<double> alpha_star;
  std::vector<double> alpha_ema;
  double mean_norm = 0.0;
  std::optional<std::vector<double>> grad_norms;
  std::vector<double> reward_means;
  StepCounters counters;
  std::optional<HarmonyReport> harmony_harmonized;
  std::optional<HarmonyReport> harmony_weighted_sum;
};

inline nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["mode"] = r.mode;
  j["refreshed"] = r.refreshed;
  j["alpha_star"] = r.alpha_star;
  j["alpha_ema"] = r.alpha_ema;
  j["mean_norm"] = r.mean_norm;
  j["grad_norms"] = r.grad_norms ? nlohmann::json(*r.grad_norms) : nlohmann::json(nullptr);
  j["reward_means"] = r.reward_means;
  j["counters"] = {{"qp_solves", r.counters.qp_solves},
                   {"clamp_activation_count", r.counters.clamp_activation_count},
                   {"pareto_fallback_used", r.counters.pareto_fallback_used},
                   {"degenerate_qp_count", r.counters.degenerate_qp_count},
                   {"zero_signal_count", r.counters.zero_signal_count}};
  if (r.harmony_harmonized || r.harmony_weighted_sum) {
    nlohmann::json h = nlohmann::json::object();
    if (r.harmony_harmonized) h["harmonized"] = to_json(*r.harmony_harmonized);
    if (r.harmony_weighted_sum) h["weighted_sum"] = to_json(*r.harmony_weighted_sum);
    j["harmony"] = h;
  } else {
    j["harmony"] = nullptr;
  }
  j["window"] = 1;
  return j;
}

inline StepRecord step_record_from_json(const nlohmann::json& j) {
  StepRecord r;
  r.step = j.at("step").get<std::int64_t>();
  r.mode = j.at("mode").get<std::string>();
  r.refreshed = j.at("refreshed").get<bool>();
  r.alpha_star = j.at("alpha_star").get<std::vector<double>>();
  r.alpha_ema = j.at("alpha_ema").get<std::vector<double>>();
  r.mean_norm = j.at("mean_norm").get<double>();
  if (!j.at("grad_norms").is_null()) r.grad_norms = j["grad_norms"].get<std::vector<double>>();
  r.reward_means = j.at("reward_means").get<std::vector<double>>();
  const auto& c = j.at("counters");
  r.counters.qp_solves = c.at("qp_solves").get<std::int64_t>();
  r.counters.clamp_activation_count = c.at("clamp_activation_count").get<std::int64_t>();
  r.counters.pareto_fallback_used = c.at("pareto_fallback_used").get<std::int64_t>();
  r.counters.degenerate_qp_count = c.at("degenerate_qp_count").get<std::int64_t>();
  r.counters.zero_signal_count = c.at("zero_signal_count").get<std::int64_t>();
  const auto& h = j.at("harmony");
  if (!h.is_null()) {
    if (h.contains("harmonized")) r.harmony_harmonized = harmony_from_json(h["harmonized"]);
    if (h.contains("weighted_sum")) r.harmony_weighted_sum = harmony_from_json(h["weighted_sum"]);
  }
  return r;
}

inline std::vector<StepRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_metrics: cannot open " + path);
  std::vector<StepRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(step_record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

/// Single-owner append stream for JSONL step records.
class MetricsWriter {
public:
  explicit MetricsWriter(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("metrics: cannot open " + path);
  }

  void append(const StepRecord& r) {
    out_ << to_json(r).dump() << '\n';
    if (!out_) throw IoError("metrics: write failed for " + path_);
  }

  void flush() { out_.flush(); }

private:
  std::string path_;
  std::ofstream out_;
};

inline void write_metrics(std::span<const StepRecord> records, const std::string& path) {
  MetricsWriter w(path);
  for (const auto& r : records) w.append(r);
}

namespace detail {
inline std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}
}  // namespace detail

/// step,<reward names>: per-step mean raw reward of the rollout batch.
inline void write_reward_curves(std::span<const StepRecord> records, std::span<const std::string> reward_names,
                                const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("reward curves: cannot open " + path);
  out << "step";
  for (const auto& n : reward_names) out << ',' << n;
  out << '\n';
  for (const auto& r : records) {
    out << r.step;
    for (double v : r.reward_means) out << ',' << detail::csv_number(v);
    out << '\n';
  }
  if (!out) throw IoError("reward curves: write failed for " + path);
}

/// step,alpha_ema_<name>...,alpha_star_<name>...,pareto_fallback_used
inline void write_coefficient_curves(std::span<const StepRecord> records, std::span<const std::string> reward_names,
                                     const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("coefficient curves: cannot open " + path);
  out << "step";
  for (const auto& n : reward_names) out << ",alpha_ema_" << n;
  for (const auto& n : reward_names) out << ",alpha_star_" << n;
  out << ",pareto_fallback_used\n";
  for (const auto& r : records) {
    out << r.step;
    for (double v : r.alpha_ema) out << ',' << detail::csv_number(v);
    for (double v : r.alpha_star) out << ',' << detail::csv_number(v);
    out << ',' << r.counters.pareto_fallback_used << '\n';
  }
  if (!out) throw IoError("coefficient curves: write failed for " + path);
}

}  // namespace marble
