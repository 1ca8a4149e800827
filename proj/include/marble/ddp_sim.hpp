// SPDX-License-Identifier: Apache-2.0
//
// In-process simulation of multi-worker per-reward gradient synchronization.
// Every rank extracts its K local gradients with the automatic all-reduce
// suppressed, then each g_k is averaged across ranks in fixed rank order and
// every rank solves the harmonization QP on the averaged set.
#pragma once

#include <future>
#include <string>
#include <vector>

#include "marble/advantage.hpp"
#include "marble/harmonizer.hpp"
#include "marble/nft.hpp"
#include "marble/types.hpp"
#include "marble/velocity_model.hpp"

namespace marble::ddp {

struct WorkerShard {
  int rank = 0;
  NftBatch batch;
  AdvantageMatrix advantages;
};

/// Contiguous equal slices in rank order. Unequal shards are rejected: an
/// unweighted average only reproduces the full-batch mean when sizes match.
inline std::vector<WorkerShard> shard_batch(const NftBatch& batch, const AdvantageMatrix& advantages,
                                            int world_size) {
  if (world_size < 1) throw ShardError("shard_batch: world_size must be >= 1");
  if (advantages.rows() != batch.size())
    throw DimensionError("shard_batch: advantage rows do not match batch size");
  const std::size_t n = batch.size();
  const auto w = static_cast<std::size_t>(world_size);
  if (n == 0 || n % w != 0)
    throw ShardError("shard_batch: batch size " + std::to_string(n) + " is not divisible by world_size " +
                     std::to_string(world_size));
  const std::size_t per = n / w;
  std::vector<WorkerShard> shards;
  for (std::size_t r = 0; r < w; ++r)
    shards.push_back({static_cast<int>(r), batch.slice(r * per, (r + 1) * per),
                      advantages.slice(r * per, (r + 1) * per)});
  return shards;
}

struct SyncResult {
  std::vector<GradientVector> averaged;       ///< K averaged per-reward gradients
  std::vector<SimplexWeights> rank_alpha;     ///< alpha solved locally on each rank
  std::vector<HarmonizationResult> rank_results;
};

namespace detail {

// Fixed-order reduction: sum over ranks 0..W-1, then divide by W.
inline std::vector<GradientVector> rank_ordered_mean(const std::vector<std::vector<GradientVector>>& local) {
  const std::size_t w = local.size();
  const std::size_t k = local.front().size();
  std::vector<GradientVector> out(k, GradientVector(local.front().front().size(), 0.0));
  for (std::size_t r = 0; r < w; ++r)
    for (std::size_t j = 0; j < k; ++j) vec::axpy(1.0, local[r][j], out[j]);
  for (auto& g : out)
    for (auto& v : g) v /= static_cast<double>(w);
  return out;
}

inline void check_shards(const std::vector<WorkerShard>& shards) {
  if (shards.empty()) throw ShardError("ddp: no shards");
  for (std::size_t r = 0; r < shards.size(); ++r) {
    if (shards[r].rank != static_cast<int>(r)) throw ShardError("ddp: shards must be rank-ordered");
    if (shards[r].batch.size() != shards.front().batch.size()) throw ShardError("ddp: unequal shard sizes");
  }
}

}  // namespace detail

/// Local per-reward extraction on every rank (optionally concurrent), rank-ordered
/// averaging, then an independent harmonization solve per rank.
inline SyncResult simulate_sync_step(const std::vector<WorkerShard>& shards, const VelocityModel& model,
                                     const HarmonizerConfig& config, bool parallel_ranks = false) {
  detail::check_shards(shards);
  const auto loss = config.loss_config();
  std::vector<std::vector<GradientVector>> local(shards.size());
  if (parallel_ranks) {
    std::vector<std::future<std::vector<GradientVector>>> jobs;
    for (const auto& s : shards)
      jobs.push_back(std::async(std::launch::async, [&model, &s, &loss] {
        return per_reward_gradients(model, s.batch, s.advantages, loss);
      }));
    for (std::size_t r = 0; r < jobs.size(); ++r) local[r] = jobs[r].get();
  } else {
    for (std::size_t r = 0; r < shards.size(); ++r)
      local[r] = per_reward_gradients(model, shards[r].batch, shards[r].advantages, loss);
  }

  SyncResult out;
  out.averaged = detail::rank_ordered_mean(local);
  for (std::size_t r = 0; r < shards.size(); ++r) {
    // each rank holds its own copy of the all-reduced buffers
    const std::vector<GradientVector> copy = out.averaged;
    out.rank_results.push_back(solve_full_harmonization(copy, config));
    out.rank_alpha.push_back(out.rank_results.back().alpha_star);
  }
  const auto& ref = out.rank_alpha.front();
  for (std::size_t r = 1; r < out.rank_alpha.size(); ++r)
    if (vec::max_abs_diff(ref.values(), out.rank_alpha[r].values()) > 1e-12)
      throw SyncViolationError("ddp: rank " + std::to_string(r) + " solved a different alpha than rank 0");
  return out;
}

/// The failure mode of leaving the automatic all-reduce on: each reward
/// backward accumulates into the same parameter-gradient buffer, which is
/// averaged after every backward, so the k-th extraction reads the running
/// sum g_1 + ... + g_k instead of g_k.
inline std::vector<GradientVector> simulate_premature_sync(const std::vector<WorkerShard>& shards,
                                                           const VelocityModel& model,
                                                           const HarmonizerConfig& config) {
  detail::check_shards(shards);
  const auto loss = config.loss_config();
  const std::size_t k = shards.front().advantages.cols();
  std::vector<GradientVector> buffer(shards.size(), GradientVector(model.parameter_count(), 0.0));
  std::vector<GradientVector> extracted;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<std::vector<GradientVector>> reduced(shards.size());
    for (std::size_t r = 0; r < shards.size(); ++r) {
      const auto rs = column_to_r(shards[r].advantages, j, loss.a_max);
      vec::axpy(1.0, nft_gradient(model, shards[r].batch, rs, loss), buffer[r]);
      reduced[r] = {buffer[r]};
    }
    const auto mean = detail::rank_ordered_mean(reduced).front();
    for (auto& b : buffer) b = mean;
    extracted.push_back(mean);
  }
  return extracted;
}

}  // namespace marble::ddp
