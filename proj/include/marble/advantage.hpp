// SPDX-License-Identifier: Apache-2.0
//
// Per-reward, per-prompt-group z-score advantages and the affine map from an
// advantage to the NFT interpolation coefficient r.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "marble/types.hpp"

namespace marble {

inline constexpr double kDefaultAdvantageEpsilon = 1e-8;
inline constexpr double kDefaultAMax = 5.0;

struct RewardSample {
  std::uint64_t sample_id = 0;
  int prompt_id = 0;
  std::vector<double> rewards;  ///< raw R_k(x), one per reward
};

/// Population statistics of one reward inside one prompt group.
struct GroupStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::int64_t count = 0;
};

enum class StatsMode { kBatch, kRunning };

/// Welford accumulators keyed by (prompt_id, reward index). Single writer.
class GroupStatsStore {
public:
  GroupStatsStore() = default;
  explicit GroupStatsStore(std::size_t num_rewards) : num_rewards_(num_rewards) {}

  std::size_t num_rewards() const noexcept { return num_rewards_; }

  void update(std::span<const RewardSample> batch) {
    if (batch.empty()) throw EmptyInputError("update_group_stats: empty batch");
    for (const auto& s : batch) validate(s);
    for (const auto& s : batch) {
      for (std::size_t k = 0; k < num_rewards_; ++k) {
        auto& acc = accumulators_[{s.prompt_id, k}];
        acc.count += 1;
        const double delta = s.rewards[k] - acc.mean;
        acc.mean += delta / static_cast<double>(acc.count);
        acc.m2 += delta * (s.rewards[k] - acc.mean);
      }
    }
  }

  bool contains(int prompt_id, std::size_t k) const {
    return accumulators_.count({prompt_id, k}) != 0;
  }

  GroupStats get(int prompt_id, std::size_t k) const {
    auto it = accumulators_.find({prompt_id, k});
    if (it == accumulators_.end()) {
      throw LookupError("group stats missing for prompt " + std::to_string(prompt_id) + ", reward " +
                        std::to_string(k));
    }
    const auto& acc = it->second;
    GroupStats g;
    g.mean = acc.mean;
    g.count = acc.count;
    g.stddev = acc.count > 0 ? std::sqrt(std::max(acc.m2, 0.0) / static_cast<double>(acc.count)) : 0.0;
    return g;
  }

  void clear() { accumulators_.clear(); }

private:
  struct Accumulator {
    std::int64_t count = 0;
    double mean = 0.0;
    double m2 = 0.0;
  };

  void validate(const RewardSample& s) const {
    if (s.rewards.size() != num_rewards_) {
      throw DimensionError("sample " + std::to_string(s.sample_id) + ": expected " +
                           std::to_string(num_rewards_) + " rewards, got " +
                           std::to_string(s.rewards.size()));
    }
    for (double r : s.rewards)
      if (!std::isfinite(r)) throw NumericError("sample " + std::to_string(s.sample_id) + ": non-finite reward");
  }

  std::size_t num_rewards_ = 0;
  std::map<std::pair<int, std::size_t>, Accumulator> accumulators_;
};

/// samples x rewards table of advantages, row-major.
class AdvantageMatrix {
public:
  AdvantageMatrix() = default;
  AdvantageMatrix(std::size_t rows, std::size_t cols, double epsilon = kDefaultAdvantageEpsilon)
      : rows_(rows), cols_(cols), epsilon_(epsilon), entries_(rows * cols, 0.0),
        sample_ids_(rows, 0), prompt_ids_(rows, 0) {
    for (std::size_t k = 0; k < cols; ++k) names_.push_back("R" + std::to_string(k + 1));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double epsilon() const noexcept { return epsilon_; }

  double& operator()(std::size_t i, std::size_t k) { return entries_[i * cols_ + k]; }
  double operator()(std::size_t i, std::size_t k) const { return entries_[i * cols_ + k]; }
  std::span<const double> row(std::size_t i) const { return {entries_.data() + i * cols_, cols_}; }

  std::vector<double> column(std::size_t k) const {
    std::vector<double> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, k);
    return out;
  }

  std::uint64_t& sample_id(std::size_t i) { return sample_ids_[i]; }
  std::uint64_t sample_id(std::size_t i) const { return sample_ids_[i]; }
  int& prompt_id(std::size_t i) { return prompt_ids_[i]; }
  int prompt_id(std::size_t i) const { return prompt_ids_[i]; }

  const std::vector<std::string>& reward_names() const noexcept { return names_; }
  void set_reward_names(std::vector<std::string> names) {
    vec::require_same_size(names.size(), cols_, "AdvantageMatrix::set_reward_names");
    names_ = std::move(names);
  }

  /// Each row repeated `times` times consecutively (one copy per training
  /// timestep drawn for the same rollout sample).
  AdvantageMatrix repeat_rows(std::size_t times) const {
    AdvantageMatrix out(rows_ * times, cols_, epsilon_);
    out.names_ = names_;
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t t = 0; t < times; ++t) {
        const std::size_t r = i * times + t;
        out.sample_ids_[r] = sample_ids_[i];
        out.prompt_ids_[r] = prompt_ids_[i];
        for (std::size_t k = 0; k < cols_; ++k) out(r, k) = (*this)(i, k);
      }
    return out;
  }

  /// Rows [begin, end).
  AdvantageMatrix slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows_) throw DimensionError("AdvantageMatrix::slice: bad range");
    AdvantageMatrix out(end - begin, cols_, epsilon_);
    out.names_ = names_;
    for (std::size_t i = begin; i < end; ++i) {
      out.sample_ids_[i - begin] = sample_ids_[i];
      out.prompt_ids_[i - begin] = prompt_ids_[i];
      for (std::size_t k = 0; k < cols_; ++k) out(i - begin, k) = (*this)(i, k);
    }
    return out;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : entries_) m = std::max(m, std::abs(v));
    return m;
  }

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  double epsilon_ = kDefaultAdvantageEpsilon;
  std::vector<double> entries_;
  std::vector<std::uint64_t> sample_ids_;
  std::vector<int> prompt_ids_;
  std::vector<std::string> names_;
};

inline void update_group_stats(GroupStatsStore& store, std::span<const RewardSample> batch) {
  store.update(batch);
}

/// A_k(x) = (R_k(x) - mu_k) / (sigma_k + eps) with statistics of x's prompt group.
inline AdvantageMatrix compute_advantages(const GroupStatsStore& store, std::span<const RewardSample> batch,
                                          double epsilon = kDefaultAdvantageEpsilon) {
  if (!(epsilon > 0.0)) throw ParameterError("compute_advantages: epsilon must be > 0");
  const std::size_t k = store.num_rewards();
  AdvantageMatrix out(batch.size(), k, epsilon);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    vec::require_same_size(s.rewards.size(), k, "compute_advantages");
    out.sample_id(i) = s.sample_id;
    out.prompt_id(i) = s.prompt_id;
    for (std::size_t j = 0; j < k; ++j) {
      const GroupStats g = store.get(s.prompt_id, j);
      const double centered = s.rewards[j] - g.mean;
      // Zero spread: every member equals the mean, so the numerator is 0.
      out(i, j) = g.stddev == 0.0 ? 0.0 : centered / (g.stddev + epsilon);
    }
  }
  return out;
}

/// Owns the statistics store and the accumulation policy.
class AdvantageEngine {
public:
  AdvantageEngine(std::size_t num_rewards, StatsMode mode = StatsMode::kBatch,
                  double epsilon = kDefaultAdvantageEpsilon)
      : store_(num_rewards), mode_(mode), epsilon_(epsilon) {
    if (!(epsilon > 0.0)) throw ParameterError("AdvantageEngine: epsilon must be > 0");
  }

  AdvantageMatrix process(std::span<const RewardSample> batch) {
    if (mode_ == StatsMode::kBatch) store_.clear();
    store_.update(batch);
    return compute_advantages(store_, batch, epsilon_);
  }

  const GroupStatsStore& store() const noexcept { return store_; }
  StatsMode mode() const noexcept { return mode_; }

private:
  GroupStatsStore store_;
  StatsMode mode_;
  double epsilon_;
};

struct InterpolationCoefficient {
  double r = 0.5;
  double a_max = kDefaultAMax;
  bool clamp_active = false;
};

/// r = clamp(1/2 + A / (2 A_max), 0, 1)
inline InterpolationCoefficient advantage_to_r(double advantage, double a_max = kDefaultAMax) {
  if (!(a_max > 0.0)) throw ParameterError("advantage_to_r: a_max must be > 0");
  if (!std::isfinite(advantage)) throw NumericError("advantage_to_r: non-finite advantage");
  InterpolationCoefficient c;
  c.a_max = a_max;
  c.clamp_active = std::abs(advantage) >= a_max;
  c.r = std::clamp(0.5 + advantage / (2.0 * a_max), 0.0, 1.0);
  return c;
}

inline std::vector<InterpolationCoefficient> column_to_r(const AdvantageMatrix& m, std::size_t k, double a_max) {
  std::vector<InterpolationCoefficient> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = advantage_to_r(m(i, k), a_max);
  return out;
}

namespace detail {
inline std::string format_g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}
}  // namespace detail

/// Samples x rewards advantage table as CSV: `sample_id,prompt_id,<reward names>`,
/// one row per sample ordered by sample_id, values with 6 significant digits.
inline void export_specialist_heatmap(const AdvantageMatrix& matrix, const std::string& path) {
  if (matrix.rows() == 0 || matrix.cols() == 0) throw EmptyInputError("export_specialist_heatmap: empty matrix");
  std::vector<std::size_t> order(matrix.rows());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return matrix.sample_id(a) < matrix.sample_id(b); });

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("export_specialist_heatmap: cannot open " + path);
  out << "sample_id,prompt_id";
  for (const auto& n : matrix.reward_names()) out << ',' << n;
  out << '\n';
  for (std::size_t i : order) {
    out << matrix.sample_id(i) << ',' << matrix.prompt_id(i);
    for (std::size_t k = 0; k < matrix.cols(); ++k) out << ',' << detail::format_g6(matrix(i, k));
    out << '\n';
  }
  if (!out) throw IoError("export_specialist_heatmap: write failed for " + path);
}

}  // namespace marble
