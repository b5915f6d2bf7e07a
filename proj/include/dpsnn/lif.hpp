#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dpsnn/errors.hpp"

namespace dpsnn {

enum class ResetMode { subtractive, hard };

/// Discrete-time leaky integrate-and-fire parameters for one layer.
///
/// The decay per step is beta = exp(-dt / tau_m); membrane resistance and dt are absorbed into
/// the synaptic weights. With `hard` reset the membrane returns to `v_rest`.
struct LifConfig {
  double v_th = 1.0;
  double v_rest = 0.0;
  ResetMode reset = ResetMode::subtractive;
  double beta_init = 0.9;
  bool beta_learnable = true;
  double surrogate_slope = 25.0;
  int tau_ref_steps = 0;

  void validate() const {
    if (!(beta_init > 0.0 && beta_init < 1.0)) throw ConfigError("LifConfig: beta_init must lie in (0, 1)");
    if (!(v_th > v_rest)) throw ConfigError("LifConfig: v_th must exceed v_rest");
    if (!(surrogate_slope > 0.0)) throw ConfigError("LifConfig: surrogate_slope must be positive");
    if (tau_ref_steps < 0) throw ConfigError("LifConfig: tau_ref_steps must be >= 0");
  }
};

/// Dense feed-forward LIF stack. `layer_sizes` includes the input width first and the class
/// count last; `lif` holds one config per non-input layer.
struct NetworkArch {
  std::vector<std::size_t> layer_sizes;
  std::vector<LifConfig> lif;
  std::size_t t_steps = 200;

  static NetworkArch dense(std::vector<std::size_t> sizes, std::size_t t_steps, const LifConfig& cfg = {}) {
    NetworkArch a;
    a.layer_sizes = std::move(sizes);
    a.lif.assign(a.layer_sizes.empty() ? 0 : a.layer_sizes.size() - 1, cfg);
    a.t_steps = t_steps;
    a.validate();
    return a;
  }

  std::size_t n_layers() const { return layer_sizes.size() - 1; }
  std::size_t input_size() const { return layer_sizes.front(); }
  std::size_t n_classes() const { return layer_sizes.back(); }
  std::size_t fan_in(std::size_t layer) const { return layer_sizes[layer]; }
  std::size_t width(std::size_t layer) const { return layer_sizes[layer + 1]; }

  /// Neurons that count toward the network-wide rate (hidden and output layers).
  std::size_t active_neurons() const {
    std::size_t n = 0;
    for (std::size_t l = 1; l < layer_sizes.size(); ++l) n += layer_sizes[l];
    return n;
  }

  void validate() const {
    if (layer_sizes.size() < 2) throw ConfigError("NetworkArch: need at least 2 layers");
    for (auto n : layer_sizes)
      if (n == 0) throw ConfigError("NetworkArch: layer sizes must be >= 1");
    if (lif.size() != layer_sizes.size() - 1)
      throw ConfigError("NetworkArch: need one LifConfig per non-input layer");
    if (t_steps == 0) throw ConfigError("NetworkArch: t_steps must be >= 1");
    for (const auto& c : lif) c.validate();
  }
};

/// Binary spike record laid out as (sample, step, neuron), neuron fastest.
class SpikeTensor {
 public:
  SpikeTensor() = default;
  SpikeTensor(std::size_t batch, std::size_t steps, std::size_t neurons)
      : batch_(batch), steps_(steps), neurons_(neurons), data_(batch * steps * neurons, 0) {
    if (batch == 0 || steps == 0 || neurons == 0) throw ConfigError("SpikeTensor: dims must be positive");
  }
  SpikeTensor(std::size_t batch, std::size_t steps, std::size_t neurons, std::vector<std::uint8_t> data)
      : batch_(batch), steps_(steps), neurons_(neurons), data_(std::move(data)) {
    if (batch == 0 || steps == 0 || neurons == 0) throw ConfigError("SpikeTensor: dims must be positive");
    if (data_.size() != batch * steps * neurons) throw ConfigError("SpikeTensor: data size mismatch");
    for (auto v : data_)
      if (v > 1) throw ConfigError("SpikeTensor: entries must be 0 or 1");
  }

  std::size_t batch() const { return batch_; }
  std::size_t steps() const { return steps_; }
  std::size_t neurons() const { return neurons_; }
  bool empty() const { return data_.empty(); }
  std::size_t sample_stride() const { return steps_ * neurons_; }

  std::uint8_t at(std::size_t b, std::size_t t, std::size_t j) const { return data_[(b * steps_ + t) * neurons_ + j]; }
  void set(std::size_t b, std::size_t t, std::size_t j, bool v) {
    data_[(b * steps_ + t) * neurons_ + j] = v ? 1 : 0;
  }

  std::span<const std::uint8_t> sample(std::size_t b) const {
    return {data_.data() + b * sample_stride(), sample_stride()};
  }
  std::span<std::uint8_t> sample(std::size_t b) { return {data_.data() + b * sample_stride(), sample_stride()}; }

  const std::vector<std::uint8_t>& raw() const { return data_; }
  std::vector<std::uint8_t>& raw() { return data_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data_) n += v;
    return n;
  }

  friend bool operator==(const SpikeTensor&, const SpikeTensor&) = default;

 private:
  std::size_t batch_ = 0;
  std::size_t steps_ = 0;
  std::size_t neurons_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Fast-sigmoid surrogate derivative 1 / (1 + k|x|)^2.
inline double surrogate_grad(double x, double slope) {
  const double d = 1.0 + slope * std::abs(x);
  return 1.0 / (d * d);
}

/// Smooth spike used by the soft-forward verification mode: a logistic with gain 4 so that its
/// derivative at the threshold equals the fast-sigmoid peak (1).
inline constexpr double kSoftGain = 4.0;

inline double soft_spike(double x) { return 1.0 / (1.0 + std::exp(-kSoftGain * x)); }

inline double soft_spike_grad(double x) {
  const double s = soft_spike(x);
  return kSoftGain * s * (1.0 - s);
}

/// One neuron, one step. `pre` is the potential after leak and input but before reset.
struct NeuronUpdate {
  double pre;
  double post;
  bool spike;
  bool refractory;
};

inline NeuronUpdate lif_neuron_update(double u_prev, double current, const LifConfig& cfg, double beta,
                                      int& refractory_left) {
  if (refractory_left > 0) {
    --refractory_left;
    return {u_prev, u_prev, false, true};
  }
  const double pre = beta * (u_prev - cfg.v_rest) + cfg.v_rest + current;
  const bool spike = pre >= cfg.v_th;
  double post = pre;
  if (spike) {
    post = cfg.reset == ResetMode::subtractive ? pre - cfg.v_th : cfg.v_rest;
    refractory_left = cfg.tau_ref_steps;
  }
  return {pre, post, spike, false};
}

struct LifStepResult {
  std::vector<double> u_next;
  std::vector<std::uint8_t> spikes;
};

/// Vector LIF update with Heaviside spiking. `refractory` (optional) holds per-neuron remaining
/// refractory steps and is updated in place. `layer`/`step` only label diagnostics.
inline LifStepResult lif_step(std::span<const double> u_prev, std::span<const double> current,
                              const LifConfig& cfg, double beta, std::span<int> refractory = {},
                              std::size_t layer = 0, std::size_t step = 0) {
  if (u_prev.size() != current.size()) throw ConfigError("lif_step: potential/current size mismatch");
  if (!refractory.empty() && refractory.size() != u_prev.size())
    throw ConfigError("lif_step: refractory state size mismatch");
  LifStepResult out{std::vector<double>(u_prev.size()), std::vector<std::uint8_t>(u_prev.size())};
  for (std::size_t j = 0; j < u_prev.size(); ++j) {
    if (!std::isfinite(u_prev[j]) || !std::isfinite(current[j]))
      throw NumericError("non-finite membrane input at layer " + std::to_string(layer) + ", step " +
                         std::to_string(step) + ", neuron " + std::to_string(j));
    int none = 0;
    int& refr = refractory.empty() ? none : refractory[j];
    const auto r = lif_neuron_update(u_prev[j], current[j], cfg, beta, refr);
    out.u_next[j] = r.post;
    out.spikes[j] = r.spike ? 1 : 0;
  }
  return out;
}

inline LifStepResult lif_step(std::span<const double> u_prev, std::span<const double> current, const LifConfig& cfg) {
  return lif_step(u_prev, current, cfg, cfg.beta_init);
}

}  // namespace dpsnn
