#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "dpsnn/errors.hpp"
#include "dpsnn/lif.hpp"
#include "dpsnn/rng.hpp"

namespace dpsnn {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Flat parameter store for a NetworkArch. Each layer owns one contiguous block laid out as
/// [weights (rows = width, cols = fan-in, row-major) | biases | beta_raw], and the blocks are
/// concatenated in layer order. The decay used in simulation is sigmoid(beta_raw).
class ModelParams {
 public:
  struct Block {
    std::size_t offset;  // start of weights
    std::size_t rows;
    std::size_t cols;
    std::size_t bias_offset() const { return offset + rows * cols; }
    std::size_t beta_offset() const { return bias_offset() + rows; }
    std::size_t size() const { return rows * cols + rows + 1; }
  };

  ModelParams() = default;

  /// Zero weights and biases; decays at their configured initial value.
  explicit ModelParams(const NetworkArch& arch) {
    arch.validate();
    std::size_t off = 0;
    for (std::size_t l = 0; l < arch.n_layers(); ++l) {
      blocks_.push_back({off, arch.width(l), arch.fan_in(l)});
      off += blocks_.back().size();
    }
    data_.assign(off, 0.0);
    for (std::size_t l = 0; l < arch.n_layers(); ++l) beta_raw(l) = logit(arch.lif[l].beta_init);
  }

  /// Uniform(-gain/sqrt(fan_in), gain/sqrt(fan_in)) weights, zero biases.
  static ModelParams random(const NetworkArch& arch, Rng& rng, double gain = 1.0) {
    ModelParams p(arch);
    for (std::size_t l = 0; l < p.n_layers(); ++l) {
      const double bound = gain / std::sqrt(static_cast<double>(p.blocks_[l].cols));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& w : p.weights(l)) w = u(rng);
    }
    return p;
  }

  /// Same block structure, all entries zero (gradient accumulators).
  ModelParams zeros_like() const {
    ModelParams p = *this;
    std::fill(p.data_.begin(), p.data_.end(), 0.0);
    return p;
  }

  std::size_t size() const { return data_.size(); }
  std::size_t n_layers() const { return blocks_.size(); }
  const Block& block(std::size_t l) const { return blocks_[l]; }
  const std::vector<Block>& blocks() const { return blocks_; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  std::span<double> layer(std::size_t l) { return {data_.data() + blocks_[l].offset, blocks_[l].size()}; }
  std::span<const double> layer(std::size_t l) const {
    return {data_.data() + blocks_[l].offset, blocks_[l].size()};
  }
  std::span<double> weights(std::size_t l) {
    return {data_.data() + blocks_[l].offset, blocks_[l].rows * blocks_[l].cols};
  }
  std::span<const double> weights(std::size_t l) const {
    return {data_.data() + blocks_[l].offset, blocks_[l].rows * blocks_[l].cols};
  }
  std::span<double> biases(std::size_t l) { return {data_.data() + blocks_[l].bias_offset(), blocks_[l].rows}; }
  std::span<const double> biases(std::size_t l) const {
    return {data_.data() + blocks_[l].bias_offset(), blocks_[l].rows};
  }
  double& beta_raw(std::size_t l) { return data_[blocks_[l].beta_offset()]; }
  double beta_raw(std::size_t l) const { return data_[blocks_[l].beta_offset()]; }
  double beta(std::size_t l) const { return sigmoid(beta_raw(l)); }

  /// Offsets splitting the flat vector into per-layer blocks (n_layers + 1 entries).
  std::vector<std::size_t> block_offsets() const {
    std::vector<std::size_t> out;
    for (const auto& b : blocks_) out.push_back(b.offset);
    out.push_back(data_.size());
    return out;
  }

  bool same_shape(const ModelParams& o) const {
    if (blocks_.size() != o.blocks_.size() || data_.size() != o.data_.size()) return false;
    for (std::size_t l = 0; l < blocks_.size(); ++l)
      if (blocks_[l].rows != o.blocks_[l].rows || blocks_[l].cols != o.blocks_[l].cols) return false;
    return true;
  }

  ModelParams& operator+=(const ModelParams& o) {
    check_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  ModelParams& operator-=(const ModelParams& o) {
    check_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  ModelParams& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  /// this += a * x
  void axpy(double a, const ModelParams& x) {
    check_shape(x);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * x.data_[i];
  }
  void axpy(double a, std::span<const double> x) {
    if (x.size() != data_.size()) throw ConfigError("ModelParams: flat vector length mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * x[i];
  }
  double dot(const ModelParams& o) const {
    check_shape(o);
    double s = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) s += data_[i] * o.data_[i];
    return s;
  }
  double norm() const { return std::sqrt(dot(*this)); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) { return a.data_ == b.data_; }

 private:
  void check_shape(const ModelParams& o) const {
    if (o.data_.size() != data_.size()) throw ConfigError("ModelParams: dimension mismatch");
  }

  std::vector<Block> blocks_;
  std::vector<double> data_;
};

inline ModelParams operator+(ModelParams a, const ModelParams& b) { return a += b; }
inline ModelParams operator-(ModelParams a, const ModelParams& b) { return a -= b; }
inline ModelParams operator*(ModelParams a, double s) { return a *= s; }

}  // namespace dpsnn
