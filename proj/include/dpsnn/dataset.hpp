#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dpsnn/errors.hpp"
#include "dpsnn/lif.hpp"

namespace dpsnn {

/// Spike trains with one class label per sample.
struct LabeledSpikes {
  SpikeTensor spikes;
  std::vector<int> labels;
  std::size_t n_classes = 0;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t steps() const { return spikes.steps(); }
  std::size_t channels() const { return spikes.neurons(); }
  std::span<const std::uint8_t> sample(std::size_t i) const { return spikes.sample(i); }

  void validate() const {
    if (spikes.batch() != labels.size()) throw ConfigError("LabeledSpikes: label count mismatch");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= n_classes) throw ConfigError("LabeledSpikes: label out of range");
  }

  LabeledSpikes subset(std::span<const std::size_t> idx) const {
    if (idx.empty()) throw ConfigError("LabeledSpikes::subset: empty index set");
    LabeledSpikes out;
    out.n_classes = n_classes;
    out.spikes = SpikeTensor(idx.size(), steps(), channels());
    out.labels.reserve(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto src = sample(idx[k]);
      std::copy(src.begin(), src.end(), out.spikes.sample(k).begin());
      out.labels.push_back(labels[idx[k]]);
    }
    return out;
  }

  std::vector<std::size_t> class_histogram() const {
    std::vector<std::size_t> h(n_classes, 0);
    for (int y : labels) ++h[static_cast<std::size_t>(y)];
    return h;
  }

  friend bool operator==(const LabeledSpikes&, const LabeledSpikes&) = default;
};

}  // namespace dpsnn
