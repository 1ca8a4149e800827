// SPDX-License-Identifier: Apache-2.0
//
// Small conditional velocity field v_theta(x_t, t, c): a tanh MLP over the
// concatenated input [x_t, t, one_hot(c)], with a hand-written reverse pass.
//
// Parameters live in one flat vector so that gradients, update directions and
// checkpoints share a single layout: for each layer, W (out x in, row-major)
// followed by b (out).
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "marble/types.hpp"

namespace marble {

struct ModelShape {
  std::size_t state_dim = 2;
  std::size_t num_conditions = 4;
  std::vector<std::size_t> hidden = {32, 32};

  std::size_t input_dim() const noexcept { return state_dim + 1 + num_conditions; }

  /// Layer widths including input and output.
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim()};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(state_dim);
    return w;
  }

  std::size_t parameter_count() const {
    const auto w = widths();
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l + 1] * w[l] + w[l + 1];
    return n;
  }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct ModelInit {
  std::uint64_t seed = 0;
  double output_scale = 0.1;   ///< multiplies the output layer's initial weights
  bool zero_output = false;    ///< zero output layer: v_theta == 0 everywhere
};

/// Reusable per-sample activations for the reverse pass.
struct ForwardCache {
  std::vector<std::vector<double>> activations;  ///< a_0 = input, a_l = tanh(z_l), last = output
};

class VelocityModel {
public:
  VelocityModel() = default;

  explicit VelocityModel(ModelShape shape) : shape_(std::move(shape)) {
    if (shape_.state_dim == 0) throw ParameterError("VelocityModel: state_dim must be >= 1");
    if (shape_.num_conditions == 0) throw ParameterError("VelocityModel: need at least one condition");
    for (auto h : shape_.hidden)
      if (h == 0) throw ParameterError("VelocityModel: hidden widths must be >= 1");
    params_.assign(shape_.parameter_count(), 0.0);
    build_offsets();
  }

  VelocityModel(ModelShape shape, const ModelInit& init) : VelocityModel(std::move(shape)) {
    initialize(init);
  }

  /// Glorot-uniform hidden layers; the output layer is scaled down (or zeroed)
  /// so the initial flow is close to the identity map x_1 = x_0.
  void initialize(const ModelInit& init) {
    std::mt19937_64 rng(init.seed);
    const auto w = shape_.widths();
    const std::size_t layers = w.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w[l] + w[l + 1]));
      std::uniform_real_distribution<double> dist(-bound, bound);
      const bool output = l + 1 == layers;
      const double scale = output ? (init.zero_output ? 0.0 : init.output_scale) : 1.0;
      double* wp = params_.data() + weight_offset_[l];
      for (std::size_t i = 0; i < w[l + 1] * w[l]; ++i) wp[i] = scale * dist(rng);
      double* bp = params_.data() + bias_offset_[l];
      for (std::size_t i = 0; i < w[l + 1]; ++i) bp[i] = 0.0;
    }
  }

  const ModelShape& shape() const noexcept { return shape_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::span<const double> params() const noexcept { return params_; }
  std::span<double> mutable_params() noexcept { return params_; }

  void set_params(std::span<const double> p) {
    vec::require_same_size(p.size(), params_.size(), "VelocityModel::set_params");
    std::copy(p.begin(), p.end(), params_.begin());
  }

  /// [x, t, one_hot(condition)] written into `in`.
  void make_input(std::span<const double> x, double t, int condition, std::vector<double>& in) const {
    vec::require_same_size(x.size(), shape_.state_dim, "VelocityModel input");
    if (condition < 0 || static_cast<std::size_t>(condition) >= shape_.num_conditions)
      throw DimensionError("VelocityModel: condition id " + std::to_string(condition) + " out of range");
    in.assign(shape_.input_dim(), 0.0);
    std::copy(x.begin(), x.end(), in.begin());
    in[shape_.state_dim] = t;
    in[shape_.state_dim + 1 + static_cast<std::size_t>(condition)] = 1.0;
  }

  std::vector<double> forward(std::span<const double> x, double t, int condition) const {
    ForwardCache cache;
    forward(x, t, condition, cache);
    return cache.activations.back();
  }

  /// Forward pass that keeps activations for backward(). Returns the output.
  std::span<const double> forward(std::span<const double> x, double t, int condition, ForwardCache& cache) const {
    const auto& w = widths_;
    const std::size_t layers = w.size() - 1;
    cache.activations.resize(layers + 1);
    make_input(x, t, condition, cache.activations[0]);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& in = cache.activations[l];
      auto& out = cache.activations[l + 1];
      out.assign(w[l + 1], 0.0);
      const double* wp = params_.data() + weight_offset_[l];
      const double* bp = params_.data() + bias_offset_[l];
      const bool output = l + 1 == layers;
      for (std::size_t o = 0; o < w[l + 1]; ++o) {
        double z = bp[o];
        const double* row = wp + o * w[l];
        for (std::size_t i = 0; i < w[l]; ++i) z += row[i] * in[i];
        out[o] = output ? z : std::tanh(z);
      }
    }
    const auto& v = cache.activations.back();
    if (!vec::all_finite(v)) throw NumericError("VelocityModel: non-finite output");
    return v;
  }

  /// grad += (d output / d params)^T upstream, for the cached sample.
  void backward(const ForwardCache& cache, std::span<const double> upstream, std::span<double> grad) const {
    vec::require_same_size(upstream.size(), shape_.state_dim, "VelocityModel::backward upstream");
    vec::require_same_size(grad.size(), params_.size(), "VelocityModel::backward grad");
    const auto& w = widths_;
    const std::size_t layers = w.size() - 1;
    std::vector<double> delta(upstream.begin(), upstream.end());
    std::vector<double> prev;
    for (std::size_t l = layers; l-- > 0;) {
      const auto& in = cache.activations[l];
      const double* wp = params_.data() + weight_offset_[l];
      double* gw = grad.data() + weight_offset_[l];
      double* gb = grad.data() + bias_offset_[l];
      for (std::size_t o = 0; o < w[l + 1]; ++o) {
        gb[o] += delta[o];
        double* grow = gw + o * w[l];
        for (std::size_t i = 0; i < w[l]; ++i) grow[i] += delta[o] * in[i];
      }
      if (l == 0) break;
      prev.assign(w[l], 0.0);
      for (std::size_t o = 0; o < w[l + 1]; ++o) {
        const double* row = wp + o * w[l];
        for (std::size_t i = 0; i < w[l]; ++i) prev[i] += row[i] * delta[o];
      }
      for (std::size_t i = 0; i < w[l]; ++i) prev[i] *= 1.0 - in[i] * in[i];  // tanh'
      delta.swap(prev);
    }
  }

  // -- checkpoint --------------------------------------------------------------
  //
  //   offset  size  field
  //   0       8     magic "MRBLCKPT"
  //   8       4     format version (uint32, currently 1)
  //   12      4     state_dim (uint32)
  //   16      4     num_conditions (uint32)
  //   20      4     hidden layer count H (uint32)
  //   24      4*H   hidden widths (uint32 each)
  //   24+4H   8     parameter count P (uint64)
  //   32+4H   8*P   parameters (float64)
  //
  // All integers and floats little-endian.

  static constexpr std::array<char, 8> kMagic = {'M', 'R', 'B', 'L', 'C', 'K', 'P', 'T'};
  static constexpr std::uint32_t kFormatVersion = 1;

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic.data(), kMagic.size());
    write_le<std::uint32_t>(out, kFormatVersion);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape_.state_dim));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape_.num_conditions));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape_.hidden.size()));
    for (auto h : shape_.hidden) write_le<std::uint32_t>(out, static_cast<std::uint32_t>(h));
    write_le<std::uint64_t>(out, params_.size());
    for (double p : params_) {
      std::uint64_t bits;
      std::memcpy(&bits, &p, sizeof bits);
      write_le<std::uint64_t>(out, bits);
    }
    if (!out) throw IoError("checkpoint: write failed for " + path);
  }

  static VelocityModel load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw IoError("checkpoint: bad magic in " + path);
    if (read_le<std::uint32_t>(in) != kFormatVersion) throw IoError("checkpoint: unsupported version");
    ModelShape shape;
    shape.state_dim = read_le<std::uint32_t>(in);
    shape.num_conditions = read_le<std::uint32_t>(in);
    const auto h = read_le<std::uint32_t>(in);
    if (h > 64) throw IoError("checkpoint: implausible hidden layer count");
    shape.hidden.clear();
    for (std::uint32_t i = 0; i < h; ++i) shape.hidden.push_back(read_le<std::uint32_t>(in));
    const auto count = read_le<std::uint64_t>(in);
    if (!in) throw IoError("checkpoint: truncated header");
    VelocityModel model(shape);
    if (count != model.parameter_count()) throw IoError("checkpoint: parameter count does not match layer sizes");
    for (auto& p : model.params_) {
      const auto bits = read_le<std::uint64_t>(in);
      std::memcpy(&p, &bits, sizeof p);
    }
    if (!in) throw IoError("checkpoint: truncated parameter block");
    return model;
  }

private:
  void build_offsets() {
    widths_ = shape_.widths();
    const auto& w = widths_;
    weight_offset_.clear();
    bias_offset_.clear();
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      weight_offset_.push_back(off);
      off += w[l + 1] * w[l];
      bias_offset_.push_back(off);
      off += w[l + 1];
    }
  }

  template <typename T>
  static void write_le(std::ostream& out, T value) {
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
  }

  template <typename T>
  static T read_le(std::istream& in) {
    unsigned char bytes[sizeof(T)] = {};
    in.read(reinterpret_cast<char*>(bytes), sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
    return value;
  }

  ModelShape shape_;
  std::vector<double> params_;
  std::vector<std::size_t> widths_;
  std::vector<std::size_t> weight_offset_;
  std::vector<std::size_t> bias_offset_;
};

inline std::vector<double> forward_velocity(const VelocityModel& model, std::span<const double> x_t, double t,
                                            int condition) {
  if (!vec::all_finite(x_t) || !std::isfinite(t)) throw NumericError("forward_velocity: non-finite input");
  return model.forward(x_t, t, condition);
}

}  // namespace marble
