#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "dpsnn/rate_metrics.hpp"
#include "test_util.hpp"

using namespace dpsnn;

TEST(LayerRate, Examples) {
  SpikeTensor zeros(2, 3, 4);
  EXPECT_EQ(layer_rate(zeros), 0.0);
  SpikeTensor ones(2, 3, 4, std::vector<std::uint8_t>(24, 1));
  EXPECT_EQ(layer_rate(ones), 1.0);
  SpikeTensor three(2, 2, 2);
  three.set(0, 0, 0, 1);
  three.set(1, 1, 0, 1);
  three.set(1, 0, 1, 1);
  EXPECT_DOUBLE_EQ(layer_rate(three), 0.375);
  EXPECT_THROW(layer_rate(SpikeTensor{}), ConfigError);
}

TEST(LayerRate, AgreesWithNeuronMean) {
  dpsnn::Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = test::bernoulli_spikes(1 + trial % 4, 5 + trial, 3 + trial % 5, 0.1 + 0.04 * trial, rng);
    const auto r = neuron_rates(s);
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    EXPECT_NEAR(layer_rate(s), mean, 1e-12);
    for (double v : r) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(NetworkRate, Examples) {
  std::vector<double> one{0.4};
  std::vector<std::size_t> n1{7};
  EXPECT_DOUBLE_EQ(network_rate(one, n1), 0.4);
  std::vector<double> r{0.1, 0.3};
  std::vector<std::size_t> n{10, 30};
  EXPECT_NEAR(network_rate(r, n), 0.25, 1e-15);
  std::vector<double> eq{0.2, 0.2, 0.2};
  std::vector<std::size_t> sizes{3, 50, 7};
  EXPECT_NEAR(network_rate(eq, sizes), 0.2, 1e-15);
  std::vector<double> rev{0.3, 0.1};
  std::vector<std::size_t> nrev{30, 10};
  EXPECT_NEAR(network_rate(rev, nrev), network_rate(r, n), 1e-15);
  EXPECT_THROW(network_rate(r, sizes), ConfigError);
}

TEST(Footprint, Examples) {
  auto arch = NetworkArch::dense({4, 3, 2}, 5);
  ModelParams p(arch);
  for (auto& v : p.raw()) v = 0.0;
  EXPECT_EQ(footprint(p, 0.0), 2 * kFootprintLayerHeaderBytes);
  for (auto& v : p.raw()) v = 1.0;
  EXPECT_EQ(footprint(p, 0.0), 4 * p.size() + 2 * kFootprintLayerHeaderBytes);
  for (std::size_t k = 0; k < p.size(); ++k) p.raw()[k] = k % 2 ? 1e-3 : 1.0;
  EXPECT_EQ(footprint(p, 1e-2), 4 * ((p.size() + 1) / 2) + 2 * kFootprintLayerHeaderBytes);
  EXPECT_THROW(footprint(p, -1.0), ConfigError);
}

TEST(Footprint, MonotoneInThreshold) {
  dpsnn::Rng rng(2);
  auto arch = NetworkArch::dense({20, 16, 10}, 5);
  auto p = ModelParams::random(arch, rng, 1.0);
  std::uint64_t prev = footprint(p, 0.0);
  for (double th = 1e-4; th < 2.0; th *= 1.5) {
    const auto f = footprint(p, th);
    EXPECT_LE(f, prev);
    prev = f;
  }
}

TEST(Evaluate, ReportInvariants) {
  dpsnn::Rng rng(3);
  auto arch = NetworkArch::dense({12, 10, 8, 4}, 30);
  auto p = ModelParams::random(arch, rng, 3.0);
  auto data = test::random_labeled(12, 30, 12, 4, 0.3, rng);
  const auto ev = evaluate(p, arch, data);
  const auto& rep = ev.rates;
  ASSERT_EQ(rep.per_layer.size(), 3u);

  const auto fw = forward(p, data.spikes, arch);
  double total = 0.0;
  std::vector<std::size_t> sizes;
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_NEAR(rep.per_layer[l], layer_rate(fw.layers[l].spikes), 1e-12);
    const auto nr = neuron_rates(fw.layers[l].spikes);
    for (std::size_t i = 0; i < nr.size(); ++i) EXPECT_NEAR(rep.per_neuron[l][i], nr[i], 1e-12);
    total += static_cast<double>(fw.layers[l].spikes.count());
    sizes.push_back(arch.width(l));
  }
  EXPECT_NEAR(rep.network, network_rate(rep.per_layer, sizes), 1e-12);
  const double neuron_steps = 12.0 * 30.0 * static_cast<double>(arch.active_neurons());
  EXPECT_NEAR(rep.activation_sparsity, 1.0 - total / neuron_steps, 1e-12);
  EXPECT_NEAR(rep.activation_sparsity + rep.network, 1.0, 1e-12);
  EXPECT_EQ(rep.footprint_bytes, footprint(p));

  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); ++b)
    if (argmax(fw.logits[b]) == static_cast<std::size_t>(data.labels[b])) ++correct;
  EXPECT_DOUBLE_EQ(ev.accuracy, static_cast<double>(correct) / 12.0);
}

TEST(ClassRates, SingleClassAndDeterminism) {
  dpsnn::Rng rng(4);
  auto arch = NetworkArch::dense({8, 6, 3}, 20);
  auto p = ModelParams::random(arch, rng, 3.0);
  auto data = test::random_labeled(5, 20, 8, 3, 0.3, rng);
  for (auto& y : data.labels) y = 1;
  const auto r = class_rates(p, arch, data);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_FALSE(r[0].has_value());
  EXPECT_TRUE(r[1].has_value());
  EXPECT_FALSE(r[2].has_value());
  EXPECT_EQ(class_rates(p, arch, data), r);
  LabeledSpikes empty;
  empty.n_classes = 3;
  EXPECT_THROW(class_rates(p, arch, empty), ConfigError);
}

TEST(ClassRates, DisjointDriveSeparatesClasses) {
  // Class 0 drives channels 0-3, class 1 drives channels 4-7; only channels 0-3 excite the net.
  auto arch = NetworkArch::dense({8, 4, 2}, 20);
  ModelParams p(arch);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) p.weights(0)[i * 8 + j] = 0.6;
  for (auto& w : p.weights(1)) w = 0.8;
  LabeledSpikes d;
  d.n_classes = 2;
  d.spikes = SpikeTensor(4, 20, 8);
  for (std::size_t b = 0; b < 4; ++b) {
    d.labels.push_back(static_cast<int>(b % 2));
    for (std::size_t t = 0; t < 20; t += 2)
      for (std::size_t j = 0; j < 4; ++j) d.spikes.set(b, t, (b % 2) * 4 + j, 1);
  }
  const auto r = class_rates(p, arch, d);
  ASSERT_TRUE(r[0] && r[1]);
  EXPECT_NE(*r[0], *r[1]);

  for (int c = 0; c < 2; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < 4; ++b)
      if (d.labels[b] == c) idx.push_back(b);
    const auto fw = forward(p, d.subset(idx).spikes, arch);
    double spikes = 0.0;
    for (const auto& l : fw.layers) spikes += static_cast<double>(l.spikes.count());
    EXPECT_NEAR(*r[static_cast<std::size_t>(c)], spikes / (idx.size() * 20.0 * arch.active_neurons()), 1e-12);
  }
}
