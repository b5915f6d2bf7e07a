#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dpsnn/dataset.hpp"
#include "dpsnn/errors.hpp"
#include "dpsnn/model_params.hpp"
#include "dpsnn/simulate.hpp"

namespace dpsnn {

/// Reverse-mode BPTT for the dense LIF stack.
///
/// In `spiking` mode the forward pass uses the Heaviside spike and the backward pass substitutes
/// the fast-sigmoid surrogate. With `detach_reset` the reset term (spike * v_th, or the jump to
/// v_rest for hard reset) is treated as a constant. In `soft` mode the forward spike is the
/// logistic itself and the reset path is always differentiated, so the gradient is exact.
struct BackwardOptions {
  SpikeMode mode = SpikeMode::spiking;
  bool detach_reset = true;
};

/// One flat gradient per sample, stored row-major (sample, parameter).
struct PerSampleGrads {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> data;

  PerSampleGrads() = default;
  PerSampleGrads(std::size_t n, std::size_t d) : count(n), dim(d), data(n * d, 0.0) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * dim, dim}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * dim, dim}; }

  std::vector<double> mean() const {
    std::vector<double> m(dim, 0.0);
    for (std::size_t i = 0; i < count; ++i) {
      auto r = row(i);
      for (std::size_t k = 0; k < dim; ++k) m[k] += r[k];
    }
    for (auto& v : m) v /= static_cast<double>(count);
    return m;
  }
};

/// Softmax of spike counts and the cross-entropy against `label`.
inline double softmax_cross_entropy(std::span<const double> logits, int label, std::vector<double>& probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  probs.resize(logits.size());
  double z = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) z += (probs[c] = std::exp(logits[c] - mx));
  for (auto& p : probs) p /= z;
  return -(logits[static_cast<std::size_t>(label)] - mx - std::log(z));
}

/// Workspace for repeated per-sample backward passes.
class BpttEngine {
 public:
  BpttEngine(const NetworkArch& arch, BackwardOptions opts = {}) : arch_(arch), opts_(opts) { arch_.validate(); }

  const NetworkArch& arch() const { return arch_; }
  const BackwardOptions& options() const { return opts_; }
  const SampleTrace& trace() const { return trace_; }

  void simulate(const ModelParams& params, std::span<const std::uint8_t> input) {
    simulate_sample(params, arch_, input, opts_.mode, trace_);
  }

  /// Accumulates scale * d(objective)/d(theta) into `grad` for the sample last passed to
  /// simulate(). `seeds[l][i]` is d(objective)/d(spike of neuron i in layer l at any step):
  /// both the loss and every rate functional are sums over steps with step-constant weights.
  void backward(const ModelParams& params, std::span<const std::uint8_t> input,
                const std::vector<std::vector<double>>& seeds, std::span<double> grad, double scale = 1.0) {
    const std::size_t T = arch_.t_steps;
    const std::size_t L = arch_.n_layers();
    std::size_t top = L;
    while (top > 0 && all_zero(seeds[top - 1])) --top;
    if (top == 0) return;

    upstream_.resize(L);
    for (std::size_t l = top; l-- > 0;) {
      const auto& cfg = arch_.lif[l];
      const auto& lt = trace_.layers[l];
      const std::size_t n = arch_.width(l);
      const std::size_t n_in = arch_.fan_in(l);
      const auto& blk = params.block(l);
      const auto W = params.weights(l);
      const double beta = params.beta(l);
      const bool has_upstream = l + 1 < top;
      const bool need_down = l > 0;
      if (need_down) upstream_[l - 1].assign(T * n_in, 0.0);

      gu_next_.assign(n, 0.0);
      gu_prev_.assign(n, 0.0);
      ga_.assign(n, 0.0);
      double g_beta = 0.0;
      double* gW = grad.data() + blk.offset;
      double* gb = grad.data() + blk.bias_offset();

      for (std::size_t t = T; t-- > 0;) {
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t k = t * n + i;
          if (lt.refractory[k]) {
            ga_[i] = 0.0;
            gu_prev_[i] = gu_next_[i];
            continue;
          }
          const double gs = seeds[l][i] + (has_upstream ? upstream_[l][k] : 0.0);
          const double x = lt.pre[k] - cfg.v_th;
          double dspike, dpost;
          if (opts_.mode == SpikeMode::spiking) {
            dspike = surrogate_grad(x, cfg.surrogate_slope);
            if (cfg.reset == ResetMode::subtractive)
              dpost = opts_.detach_reset ? 1.0 : 1.0 - cfg.v_th * dspike;
            else
              dpost = (1.0 - lt.spike[k]) - (opts_.detach_reset ? 0.0 : (lt.pre[k] - cfg.v_rest) * dspike);
          } else {
            dspike = soft_spike_grad(x);
            if (cfg.reset == ResetMode::subtractive)
              dpost = 1.0 - cfg.v_th * dspike;
            else
              dpost = (1.0 - lt.spike[k]) - (lt.pre[k] - cfg.v_rest) * dspike;
          }
          const double ga = gs * dspike + gu_next_[i] * dpost;
          if (!std::isfinite(ga))
            throw NumericError("non-finite gradient at layer " + std::to_string(l + 1) + ", step " +
                               std::to_string(t) + ", neuron " + std::to_string(i));
          ga_[i] = ga;
          gu_prev_[i] = ga * beta;
          const double u_before = t > 0 ? lt.post[k - n] : cfg.v_rest;
          g_beta += ga * (u_before - cfg.v_rest);
          gb[i] += scale * ga;
        }

        // Weight gradient and gradient w.r.t. the layer's inputs at step t.
        if (l == 0) {
          const std::uint8_t* x = input.data() + t * n_in;
          for (std::size_t j = 0; j < n_in; ++j) {
            if (!x[j]) continue;
            for (std::size_t i = 0; i < n; ++i) gW[i * n_in + j] += scale * ga_[i];
          }
        } else {
          const double* x = trace_.layers[l - 1].spike.data() + t * n_in;
          if (opts_.mode == SpikeMode::spiking) {
            for (std::size_t j = 0; j < n_in; ++j) {
              if (x[j] == 0.0) continue;
              for (std::size_t i = 0; i < n; ++i) gW[i * n_in + j] += scale * ga_[i];
            }
          } else {
            for (std::size_t i = 0; i < n; ++i) {
              const double s = scale * ga_[i];
              double* row = gW + i * n_in;
              for (std::size_t j = 0; j < n_in; ++j) row[j] += s * x[j];
            }
          }
          double* gx = upstream_[l - 1].data() + t * n_in;
          for (std::size_t i = 0; i < n; ++i) {
            const double g = ga_[i];
            if (g == 0.0) continue;
            const double* row = W.data() + i * n_in;
            for (std::size_t j = 0; j < n_in; ++j) gx[j] += g * row[j];
          }
        }
        std::swap(gu_next_, gu_prev_);
      }
      if (cfg.beta_learnable) grad[blk.beta_offset()] += scale * g_beta * beta * (1.0 - beta);
    }
  }

  /// Cross-entropy of the last simulated sample; fills loss seeds (softmax - onehot on the output
  /// layer) into `seeds`.
  double loss_seeds(int label, std::vector<std::vector<double>>& seeds) {
    init_seeds(seeds);
    const double loss = softmax_cross_entropy(trace_.counts, label, probs_);
    auto& out = seeds.back();
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = probs_[c];
    out[static_cast<std::size_t>(label)] -= 1.0;
    return loss;
  }

  void init_seeds(std::vector<std::vector<double>>& seeds) const {
    seeds.resize(arch_.n_layers());
    for (std::size_t l = 0; l < arch_.n_layers(); ++l) seeds[l].assign(arch_.width(l), 0.0);
  }

 private:
  static bool all_zero(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
  }

  NetworkArch arch_;
  BackwardOptions opts_;
  SampleTrace trace_;
  std::vector<std::vector<double>> upstream_;
  std::vector<double> gu_next_, gu_prev_, ga_, probs_;
};

/// Per-sample cross-entropy gradients for a labeled batch.
inline PerSampleGrads backward_loss(const ModelParams& params, const NetworkArch& arch, const SpikeTensor& batch,
                                    std::span<const int> labels, BackwardOptions opts = {}) {
  if (batch.batch() != labels.size()) throw ConfigError("backward_loss: label count mismatch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= arch.n_classes()) throw ConfigError("backward_loss: label out of range");
  BpttEngine eng(arch, opts);
  PerSampleGrads out(batch.batch(), params.size());
  std::vector<std::vector<double>> seeds;
  for (std::size_t b = 0; b < batch.batch(); ++b) {
    eng.simulate(params, batch.sample(b));
    eng.loss_seeds(labels[b], seeds);
    eng.backward(params, batch.sample(b), seeds, out.row(b));
  }
  return out;
}

inline PerSampleGrads backward_loss(const ModelParams& params, const NetworkArch& arch, const LabeledSpikes& data,
                                    BackwardOptions opts = {}) {
  return backward_loss(params, arch, data.spikes, data.labels, opts);
}

/// Mean cross-entropy over a batch (forward only).
inline double mean_loss(const ModelParams& params, const NetworkArch& arch, const SpikeTensor& batch,
                        std::span<const int> labels, SpikeMode mode = SpikeMode::spiking) {
  SampleTrace tr;
  std::vector<double> probs;
  double total = 0.0;
  for (std::size_t b = 0; b < batch.batch(); ++b) {
    simulate_sample(params, arch, batch.sample(b), mode, tr);
    total += softmax_cross_entropy(tr.counts, labels[b], probs);
  }
  return total / static_cast<double>(batch.batch());
}

/// Selects a rate functional: the neuron-weighted network-wide rate, or one layer's rate
/// (`layer` indexes non-input layers from 0).
struct RateTarget {
  enum class Kind { network, layer } kind = Kind::network;
  std::size_t layer = 0;

  static RateTarget network() { return {}; }
  static RateTarget of_layer(std::size_t l) { return {Kind::layer, l}; }
};

namespace detail {

inline void rate_seeds(const NetworkArch& arch, RateTarget target, double per_sample_scale,
                       std::vector<std::vector<double>>& seeds) {
  seeds.resize(arch.n_layers());
  const double T = static_cast<double>(arch.t_steps);
  for (std::size_t l = 0; l < arch.n_layers(); ++l) {
    double w = 0.0;
    if (target.kind == RateTarget::Kind::network)
      w = 1.0 / (T * static_cast<double>(arch.active_neurons()));
    else if (target.layer == l)
      w = 1.0 / (T * static_cast<double>(arch.width(l)));
    seeds[l].assign(arch.width(l), w * per_sample_scale);
  }
}

}  // namespace detail

/// Batch-mean rate functional evaluated with the given spike mode.
inline double rate_value(const ModelParams& params, const NetworkArch& arch, const SpikeTensor& batch,
                         RateTarget target, SpikeMode mode = SpikeMode::spiking) {
  if (target.kind == RateTarget::Kind::layer && target.layer >= arch.n_layers())
    throw ConfigError("rate target layer out of range");
  SampleTrace tr;
  std::vector<std::vector<double>> seeds;
  detail::rate_seeds(arch, target, 1.0 / static_cast<double>(batch.batch()), seeds);
  double r = 0.0;
  for (std::size_t b = 0; b < batch.batch(); ++b) {
    simulate_sample(params, arch, batch.sample(b), mode, tr);
    for (std::size_t l = 0; l < arch.n_layers(); ++l) {
      if (seeds[l][0] == 0.0) continue;
      double s = 0.0;
      for (double v : tr.layers[l].spike) s += v;
      r += seeds[l][0] * s;
    }
  }
  return r;
}

/// Gradient of the batch-mean rate functional. In spiking mode spikes are relaxed through the
/// surrogate in the backward pass exactly as for the loss.
inline std::vector<double> grad_rate(const ModelParams& params, const NetworkArch& arch, const SpikeTensor& batch,
                                     RateTarget target, BackwardOptions opts = {}) {
  if (batch.batch() == 0) throw ConfigError("grad_rate: empty batch");
  if (target.kind == RateTarget::Kind::layer && target.layer >= arch.n_layers())
    throw ConfigError("grad_rate: target layer out of range");
  BpttEngine eng(arch, opts);
  std::vector<std::vector<double>> seeds;
  detail::rate_seeds(arch, target, 1.0 / static_cast<double>(batch.batch()), seeds);
  std::vector<double> g(params.size(), 0.0);
  for (std::size_t b = 0; b < batch.batch(); ++b) {
    eng.simulate(params, batch.sample(b));
    eng.backward(params, batch.sample(b), seeds, g);
  }
  return g;
}

}  // namespace dpsnn
