#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dpsnn/dataset.hpp"
#include "dpsnn/errors.hpp"
#include "dpsnn/model_params.hpp"
#include "dpsnn/simulate.hpp"

namespace dpsnn {

/// Firing statistics of a model on a labeled set. Input spikes are data, not activity, and are
/// excluded everywhere.
struct RateReport {
  std::vector<std::vector<double>> per_neuron;  // [layer][neuron]
  std::vector<double> per_layer;
  double network = 0.0;
  std::vector<std::optional<double>> per_class;  // empty optional: class absent
  double activation_sparsity = 0.0;
  std::uint64_t footprint_bytes = 0;
};

/// Mean spike density of a (batch, step, neuron) record.
inline double layer_rate(const SpikeTensor& spikes) {
  if (spikes.empty()) throw ConfigError("layer_rate: empty spike tensor");
  return static_cast<double>(spikes.count()) /
         static_cast<double>(spikes.batch() * spikes.steps() * spikes.neurons());
}

/// Per-neuron rates r_j = (1/T) sum_t s_jt, averaged over the batch.
inline std::vector<double> neuron_rates(const SpikeTensor& spikes) {
  if (spikes.empty()) throw ConfigError("neuron_rates: empty spike tensor");
  std::vector<double> r(spikes.neurons(), 0.0);
  for (std::size_t b = 0; b < spikes.batch(); ++b)
    for (std::size_t t = 0; t < spikes.steps(); ++t)
      for (std::size_t j = 0; j < spikes.neurons(); ++j) r[j] += spikes.at(b, t, j);
  for (auto& v : r) v /= static_cast<double>(spikes.batch() * spikes.steps());
  return r;
}

/// Neuron-count weighted mean of layer rates.
inline double network_rate(std::span<const double> layer_rates, std::span<const std::size_t> layer_sizes) {
  if (layer_rates.size() != layer_sizes.size()) throw ConfigError("network_rate: length mismatch");
  if (layer_rates.empty()) throw ConfigError("network_rate: no layers");
  double num = 0.0, den = 0.0;
  for (std::size_t l = 0; l < layer_rates.size(); ++l) {
    num += static_cast<double>(layer_sizes[l]) * layer_rates[l];
    den += static_cast<double>(layer_sizes[l]);
  }
  return num / den;
}

inline constexpr std::uint64_t kFootprintLayerHeaderBytes = 16;

/// Sparse-storage size: 4 bytes per parameter with |value| > threshold, plus a fixed header
/// per layer block.
inline std::uint64_t footprint(const ModelParams& params, double prune_threshold = 1e-6) {
  if (!(prune_threshold >= 0.0)) throw ConfigError("footprint: threshold must be >= 0");
  std::uint64_t kept = 0;
  for (double v : params.values())
    if (std::abs(v) > prune_threshold) ++kept;
  return 4 * kept + kFootprintLayerHeaderBytes * params.n_layers();
}

struct Evaluation {
  RateReport rates;
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
};

/// One spiking pass over `data` producing rates, class-conditional network rates and accuracy.
inline Evaluation evaluate(const ModelParams& params, const NetworkArch& arch, const LabeledSpikes& data,
                           double prune_threshold = 1e-6) {
  if (data.empty()) throw ConfigError("evaluate: empty data set");
  const std::size_t L = arch.n_layers();
  const std::size_t T = arch.t_steps;
  std::vector<std::vector<double>> counts(L);
  for (std::size_t l = 0; l < L; ++l) counts[l].assign(arch.width(l), 0.0);
  std::vector<double> class_spikes(data.n_classes, 0.0);
  std::vector<std::size_t> class_n(data.n_classes, 0);
  std::size_t correct = 0;
  Evaluation ev;
  ev.predictions.reserve(data.size());
  SampleTrace tr;
  for (std::size_t b = 0; b < data.size(); ++b) {
    simulate_sample(params, arch, data.sample(b), SpikeMode::spiking, tr);
    double total = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t n = arch.width(l);
      const auto& s = tr.layers[l].spike;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < n; ++i) counts[l][i] += s[t * n + i];
    }
    for (std::size_t l = 0; l < L; ++l)
      for (double v : tr.layers[l].spike) total += v;
    const auto y = static_cast<std::size_t>(data.labels[b]);
    class_spikes[y] += total;
    ++class_n[y];
    const auto pred = argmax(tr.counts);
    ev.predictions.push_back(pred);
    if (pred == y) ++correct;
  }

  auto& rep = ev.rates;
  const double B = static_cast<double>(data.size());
  std::vector<std::size_t> sizes;
  double total_spikes = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t n = arch.width(l);
    sizes.push_back(n);
    std::vector<double> r(n);
    double layer_total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = counts[l][i] / (B * static_cast<double>(T));
      layer_total += counts[l][i];
    }
    total_spikes += layer_total;
    rep.per_neuron.push_back(std::move(r));
    rep.per_layer.push_back(layer_total / (B * static_cast<double>(n * T)));
  }
  rep.network = network_rate(rep.per_layer, sizes);
  const double neuron_steps = B * static_cast<double>(T * arch.active_neurons());
  rep.activation_sparsity = 1.0 - total_spikes / neuron_steps;
  rep.per_class.resize(data.n_classes);
  for (std::size_t c = 0; c < data.n_classes; ++c)
    if (class_n[c] > 0)
      rep.per_class[c] = class_spikes[c] / (static_cast<double>(class_n[c] * T * arch.active_neurons()));
  rep.footprint_bytes = footprint(params, prune_threshold);
  ev.accuracy = static_cast<double>(correct) / B;
  return ev;
}

/// Network-wide rate restricted to the samples of each class; absent classes stay empty.
inline std::vector<std::optional<double>> class_rates(const ModelParams& params, const NetworkArch& arch,
                                                      const LabeledSpikes& val) {
  if (val.empty()) throw ConfigError("class_rates: empty validation set");
  return evaluate(params, arch, val).rates.per_class;
}

}  // namespace dpsnn
