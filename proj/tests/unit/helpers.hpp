// SPDX-License-Identifier: Apache-2.0
// Fixtures and independent oracles shared by the unit tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "marble/marble.hpp"

namespace testutil {

using marble::GradientVector;

inline marble::VelocityModel small_model(std::uint64_t seed, double output_scale = 1.0,
                                         std::vector<std::size_t> hidden = {8, 6}) {
  marble::ModelShape shape;
  shape.hidden = std::move(hidden);
  return marble::VelocityModel(shape, marble::ModelInit{.seed = seed, .output_scale = output_scale});
}

inline marble::NftBatch random_batch(std::mt19937_64& rng, std::size_t n, int conditions = 4) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  marble::NftBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    const double x[2] = {g(rng), g(rng)};
    const double v[2] = {g(rng), g(rng)};
    const double vo[2] = {g(rng), g(rng)};
    b.push_back(x, u(rng), v, vo, static_cast<int>(rng() % static_cast<std::uint64_t>(conditions)));
  }
  return b;
}

inline marble::AdvantageMatrix random_advantages(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                                                 double bound = 4.9) {
  std::uniform_real_distribution<double> u(-bound, bound);
  marble::AdvantageMatrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    m.sample_id(i) = i;
    for (std::size_t k = 0; k < cols; ++k) m(i, k) = u(rng);
  }
  return m;
}

inline std::vector<double> random_r(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> r(n);
  for (auto& x : r) x = u(rng);
  return r;
}

/// Central difference of f along parameter i.
inline double central_difference(marble::VelocityModel model, std::size_t i, double h,
                                 const std::function<double(const marble::VelocityModel&)>& f) {
  const double orig = model.params()[i];
  model.mutable_params()[i] = orig + h;
  const double up = f(model);
  model.mutable_params()[i] = orig - h;
  const double down = f(model);
  return (up - down) / (2.0 * h);
}

inline double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / scale;
}

/// Double-loop dot products, independent of build_gram.
inline std::vector<std::vector<double>> brute_gram(const std::vector<GradientVector>& gs) {
  std::vector<std::vector<double>> out(gs.size(), std::vector<double>(gs.size(), 0.0));
  for (std::size_t i = 0; i < gs.size(); ++i)
    for (std::size_t j = 0; j < gs.size(); ++j)
      for (std::size_t p = 0; p < gs[i].size(); ++p) out[i][j] += gs[i][p] * gs[j][p];
  return out;
}

/// Exhaustive simplex grid for K in {2, 3}: returns min over grid points of a^T G a.
inline double grid_min(const std::vector<std::vector<double>>& g, double step = 0.001) {
  const int m = static_cast<int>(std::lround(1.0 / step));
  auto q = [&](const std::vector<double>& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < a.size(); ++j) s += a[i] * g[i][j] * a[j];
    return s;
  };
  double best = 1e300;
  if (g.size() == 2) {
    for (int i = 0; i <= m; ++i) best = std::min(best, q({i * step, 1.0 - i * step}));
  } else {
    for (int i = 0; i <= m; ++i)
      for (int j = 0; i + j <= m; ++j) best = std::min(best, q({i * step, j * step, 1.0 - (i + j) * step}));
  }
  return best;
}

inline std::vector<GradientVector> random_unit_vectors(std::mt19937_64& rng, std::size_t k, std::size_t d) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<GradientVector> out(k, GradientVector(d));
  for (auto& v : out) {
    double n = 0.0;
    for (auto& x : v) {
      x = g(rng);
      n += x * x;
    }
    for (auto& x : v) x /= std::sqrt(n);
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testutil
