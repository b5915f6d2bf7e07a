#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dpsnn/errors.hpp"
#include "dpsnn/lif.hpp"
#include "dpsnn/model_params.hpp"

namespace dpsnn {

/// `spiking`: Heaviside forward (the model as deployed). `soft`: the spike is replaced by a
/// logistic of the threshold offset so the whole network is differentiable; used to check
/// gradients against finite differences.
enum class SpikeMode { spiking, soft };

/// Per-sample record of one layer, each array laid out (step, neuron).
struct LayerTrace {
  std::size_t width = 0;
  std::vector<double> pre;    // potential after leak + input, before reset
  std::vector<double> post;   // potential after reset
  std::vector<double> spike;  // 0/1 when spiking, logistic value when soft
  std::vector<std::uint8_t> refractory;
};

struct SampleTrace {
  std::vector<LayerTrace> layers;
  std::vector<double> counts;  // per-class output spike counts (the logits)
};

namespace detail {

inline void check_input(const NetworkArch& arch, std::span<const std::uint8_t> input) {
  if (input.size() != arch.t_steps * arch.input_size())
    throw ConfigError("forward: input shape (T x channels) does not match the architecture");
}

}  // namespace detail

/// Runs one sample through the stack. Layer l at step t is driven by layer l-1's spikes at the
/// same step. Reuses `trace` buffers across calls.
inline void simulate_sample(const ModelParams& params, const NetworkArch& arch, std::span<const std::uint8_t> input,
                            SpikeMode mode, SampleTrace& trace) {
  detail::check_input(arch, input);
  if (mode == SpikeMode::soft)
    for (const auto& c : arch.lif)
      if (c.tau_ref_steps > 0) throw ConfigError("soft forward does not support refractory periods");
  const std::size_t T = arch.t_steps;
  const std::size_t L = arch.n_layers();
  trace.layers.resize(L);
  std::vector<std::size_t> active;
  std::vector<double> current;
  std::vector<int> refr;

  for (std::size_t l = 0; l < L; ++l) {
    const auto& cfg = arch.lif[l];
    const std::size_t n_in = arch.fan_in(l);
    const std::size_t n = arch.width(l);
    auto& lt = trace.layers[l];
    lt.width = n;
    lt.pre.assign(T * n, 0.0);
    lt.post.assign(T * n, 0.0);
    lt.spike.assign(T * n, 0.0);
    lt.refractory.assign(T * n, 0);
    const auto W = params.weights(l);
    const auto bias = params.biases(l);
    const double beta = params.beta(l);
    current.assign(n, 0.0);
    refr.assign(n, 0);
    const bool dense_input = (mode == SpikeMode::soft && l > 0);
    const double* prev_spike = l > 0 ? trace.layers[l - 1].spike.data() : nullptr;

    for (std::size_t t = 0; t < T; ++t) {
      std::copy(bias.begin(), bias.end(), current.begin());
      if (dense_input) {
        const double* x = prev_spike + t * n_in;
        for (std::size_t i = 0; i < n; ++i) {
          const double* row = W.data() + i * n_in;
          double acc = 0.0;
          for (std::size_t j = 0; j < n_in; ++j) acc += row[j] * x[j];
          current[i] += acc;
        }
      } else {
        active.clear();
        if (l == 0) {
          const std::uint8_t* x = input.data() + t * n_in;
          for (std::size_t j = 0; j < n_in; ++j)
            if (x[j]) active.push_back(j);
        } else {
          const double* x = prev_spike + t * n_in;
          for (std::size_t j = 0; j < n_in; ++j)
            if (x[j] != 0.0) active.push_back(j);
        }
        if (!active.empty()) {
          for (std::size_t i = 0; i < n; ++i) {
            const double* row = W.data() + i * n_in;
            double acc = 0.0;
            for (auto j : active) acc += row[j];
            current[i] += acc;
          }
        }
      }

      const double* u_prev = t > 0 ? lt.post.data() + (t - 1) * n : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const double up = u_prev ? u_prev[i] : cfg.v_rest;
        if (!std::isfinite(current[i]))
          throw NumericError("non-finite input current at layer " + std::to_string(l + 1) + ", step " +
                             std::to_string(t) + ", neuron " + std::to_string(i));
        const std::size_t k = t * n + i;
        if (mode == SpikeMode::spiking) {
          const auto r = lif_neuron_update(up, current[i], cfg, beta, refr[i]);
          lt.pre[k] = r.pre;
          lt.post[k] = r.post;
          lt.spike[k] = r.spike ? 1.0 : 0.0;
          lt.refractory[k] = r.refractory ? 1 : 0;
        } else {
          const double pre = beta * (up - cfg.v_rest) + cfg.v_rest + current[i];
          const double s = soft_spike(pre - cfg.v_th);
          lt.pre[k] = pre;
          lt.spike[k] = s;
          lt.post[k] = cfg.reset == ResetMode::subtractive ? pre - s * cfg.v_th : (1.0 - s) * pre + s * cfg.v_rest;
        }
      }
    }
  }

  const auto& out = trace.layers.back();
  const std::size_t C = arch.n_classes();
  trace.counts.assign(C, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) trace.counts[c] += out.spike[t * C + c];
}

/// Batch membrane record for one layer: (sample, step, neuron) arrays.
struct MembraneTrace {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::size_t width = 0;
  std::vector<double> pre_reset;
  std::vector<double> potentials;
  SpikeTensor spikes;
};

struct ForwardResult {
  std::vector<MembraneTrace> layers;
  std::vector<std::vector<double>> logits;  // per sample, per class spike counts
};

/// Spiking forward pass over a batch, recording every layer's trace.
inline ForwardResult forward(const ModelParams& params, const SpikeTensor& input, const NetworkArch& arch) {
  if (input.neurons() != arch.input_size() || input.steps() != arch.t_steps)
    throw ConfigError("forward: input dims (" + std::to_string(input.steps()) + ", " +
                      std::to_string(input.neurons()) + ") do not match architecture (" +
                      std::to_string(arch.t_steps) + ", " + std::to_string(arch.input_size()) + ")");
  ForwardResult res;
  const std::size_t B = input.batch(), T = arch.t_steps;
  for (std::size_t l = 0; l < arch.n_layers(); ++l) {
    MembraneTrace mt;
    mt.batch = B;
    mt.steps = T;
    mt.width = arch.width(l);
    mt.pre_reset.resize(B * T * mt.width);
    mt.potentials.resize(B * T * mt.width);
    mt.spikes = SpikeTensor(B, T, mt.width);
    res.layers.push_back(std::move(mt));
  }
  SampleTrace tr;
  for (std::size_t b = 0; b < B; ++b) {
    simulate_sample(params, arch, input.sample(b), SpikeMode::spiking, tr);
    for (std::size_t l = 0; l < arch.n_layers(); ++l) {
      auto& mt = res.layers[l];
      const std::size_t stride = T * mt.width;
      std::copy(tr.layers[l].pre.begin(), tr.layers[l].pre.end(), mt.pre_reset.begin() + b * stride);
      std::copy(tr.layers[l].post.begin(), tr.layers[l].post.end(), mt.potentials.begin() + b * stride);
      auto dst = mt.spikes.sample(b);
      for (std::size_t k = 0; k < stride; ++k) dst[k] = tr.layers[l].spike[k] != 0.0 ? 1 : 0;
    }
    res.logits.push_back(tr.counts);
  }
  return res;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace dpsnn
