#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dpsnn/bptt.hpp"
#include "test_util.hpp"

using namespace dpsnn;

namespace {

struct FdCheck {
  double max_rel = 0.0;
  std::size_t worst = 0;
};

// Central differences of `f` around `p`, compared entrywise with `analytic`.
template <typename F>
FdCheck compare_with_fd(ModelParams p, const std::vector<double>& analytic, F&& f, double h = 1e-5) {
  FdCheck out;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double orig = p.raw()[k];
    p.raw()[k] = orig + h;
    const double fp = f(p);
    p.raw()[k] = orig - h;
    const double fm = f(p);
    p.raw()[k] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    // Entries below 1e-6 are compared on an absolute scale: central differences carry ~1e-11
    // of round-off at h = 1e-5.
    const double denom = std::max({std::abs(fd), std::abs(analytic[k]), 1e-6});
    const double rel = std::abs(fd - analytic[k]) / denom;
    if (rel > out.max_rel) {
      out.max_rel = rel;
      out.worst = k;
    }
  }
  return out;
}

NetworkArch random_arch(dpsnn::Rng& rng) {
  std::uniform_int_distribution<std::size_t> width(2, 5), steps(3, 10), depth(1, 2);
  std::vector<std::size_t> sizes{width(rng)};
  const auto hidden = depth(rng);
  for (std::size_t i = 0; i < hidden; ++i) sizes.push_back(width(rng));
  sizes.push_back(std::uniform_int_distribution<std::size_t>(2, 3)(rng));
  auto arch = NetworkArch::dense(sizes, steps(rng));
  return arch;
}

}  // namespace

TEST(BackwardLoss, ColdStartOutputBiasClosedForm) {
  auto arch = NetworkArch::dense({6, 5, 3}, 20);
  ModelParams p(arch);
  dpsnn::Rng rng(1);
  auto data = test::random_labeled(4, 20, 6, 3, 0.4, rng);
  auto g = backward_loss(p, arch, data);
  const std::size_t out = arch.n_layers() - 1;
  const double beta = p.beta(out);
  const double surr = surrogate_grad(-arch.lif[out].v_th, arch.lif[out].surrogate_slope);
  double accum = 0.0;
  for (std::size_t m = 1; m <= arch.t_steps; ++m) accum += (1.0 - std::pow(beta, m)) / (1.0 - beta);
  for (std::size_t b = 0; b < data.size(); ++b) {
    auto row = g.row(b);
    for (std::size_t c = 0; c < 3; ++c) {
      const double softmax_minus_onehot = 1.0 / 3.0 - (data.labels[b] == static_cast<int>(c) ? 1.0 : 0.0);
      EXPECT_NEAR(row[p.block(out).bias_offset() + c], softmax_minus_onehot * surr * accum, 1e-14);
    }
  }
}

TEST(BackwardLoss, SoftForwardMatchesFiniteDifferences) {
  dpsnn::Rng rng(2024);
  const BackwardOptions soft{SpikeMode::soft, false};
  for (int trial = 0; trial < 20; ++trial) {
    auto arch = random_arch(rng);
    auto p = test::random_params(arch, rng);
    ASSERT_LE(p.size(), 200u);
    auto data = test::random_labeled(3, arch.t_steps, arch.input_size(), arch.n_classes(), 0.5, rng);
    auto grads = backward_loss(p, arch, data, soft);
    auto analytic = grads.mean();
    auto check = compare_with_fd(p, analytic, [&](const ModelParams& q) {
      return mean_loss(q, arch, data.spikes, data.labels, SpikeMode::soft);
    });
    EXPECT_LT(check.max_rel, 1e-4) << "trial " << trial << " worst index " << check.worst;
  }
}

TEST(BackwardLoss, SoftForwardHardResetMatchesFiniteDifferences) {
  dpsnn::Rng rng(77);
  LifConfig cfg;
  cfg.reset = ResetMode::hard;
  auto arch = NetworkArch::dense({4, 3, 2}, 6, cfg);
  auto p = test::random_params(arch, rng);
  auto data = test::random_labeled(2, 6, 4, 2, 0.5, rng);
  const BackwardOptions soft{SpikeMode::soft, false};
  auto analytic = backward_loss(p, arch, data, soft).mean();
  auto check = compare_with_fd(
      p, analytic, [&](const ModelParams& q) { return mean_loss(q, arch, data.spikes, data.labels, SpikeMode::soft); });
  EXPECT_LT(check.max_rel, 1e-4);
}

TEST(BackwardLoss, DuplicatedSampleGivesIdenticalRows) {
  dpsnn::Rng rng(3);
  auto arch = NetworkArch::dense({8, 6, 3}, 15);
  auto p = ModelParams::random(arch, rng, 3.0);
  auto one = test::random_labeled(1, 15, 8, 3, 0.3, rng);
  std::vector<std::size_t> idx{0, 0};
  auto dup = one.subset(idx);
  auto g = backward_loss(p, arch, dup);
  auto a = g.row(0), b = g.row(1);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(BackwardLoss, MeanOfPerSampleEqualsBatchGradient) {
  dpsnn::Rng rng(4);
  auto arch = NetworkArch::dense({10, 12, 4}, 25);
  auto p = ModelParams::random(arch, rng, 3.0);
  auto data = test::random_labeled(6, 25, 10, 4, 0.3, rng);
  auto per_sample = backward_loss(p, arch, data);
  auto mean = per_sample.mean();

  BpttEngine eng(arch);
  std::vector<std::vector<double>> seeds;
  std::vector<double> batch(p.size(), 0.0);
  for (std::size_t b = 0; b < data.size(); ++b) {
    eng.simulate(p, data.sample(b));
    eng.loss_seeds(data.labels[b], seeds);
    eng.backward(p, data.sample(b), seeds, batch, 1.0 / static_cast<double>(data.size()));
  }
  for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(mean[k], batch[k], 1e-10);
}

TEST(BackwardLoss, SampleOrderPermutesRows) {
  dpsnn::Rng rng(5);
  auto arch = NetworkArch::dense({10, 12, 4}, 25);
  auto p = ModelParams::random(arch, rng, 3.0);
  auto data = test::random_labeled(5, 25, 10, 4, 0.3, rng);
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto shuffled = data.subset(perm);
  auto g = backward_loss(p, arch, data);
  auto h = backward_loss(p, arch, shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    auto a = g.row(perm[i]), b = h.row(i);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST(BackwardLoss, RejectsBadLabels) {
  auto arch = NetworkArch::dense({4, 3, 2}, 5);
  ModelParams p(arch);
  SpikeTensor s(1, 5, 4);
  std::vector<int> labels{2};
  EXPECT_THROW(backward_loss(p, arch, s, labels), ConfigError);
}

TEST(BackwardLoss, NonFiniteGradientFlagged) {
  auto arch = NetworkArch::dense({4, 3, 2}, 5);
  ModelParams p(arch);
  p.biases(0)[0] = std::numeric_limits<double>::infinity();
  SpikeTensor s(1, 5, 4);
  std::vector<int> labels{1};
  EXPECT_THROW(backward_loss(p, arch, s, labels), NumericError);
}

TEST(BackwardLoss, RefractoryAndHardResetRunFinite) {
  dpsnn::Rng rng(6);
  LifConfig cfg;
  cfg.tau_ref_steps = 2;
  cfg.reset = ResetMode::hard;
  auto arch = NetworkArch::dense({8, 6, 3}, 30, cfg);
  auto p = ModelParams::random(arch, rng, 4.0);
  auto data = test::random_labeled(3, 30, 8, 3, 0.4, rng);
  for (bool detach : {true, false}) {
    auto g = backward_loss(p, arch, data, {SpikeMode::spiking, detach});
    for (double v : g.data) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(GradRate, SoftForwardMatchesFiniteDifferences) {
  dpsnn::Rng rng(99);
  const BackwardOptions soft{SpikeMode::soft, false};
  for (int trial = 0; trial < 20; ++trial) {
    auto arch = random_arch(rng);
    auto p = test::random_params(arch, rng);
    auto batch = test::bernoulli_spikes(3, arch.t_steps, arch.input_size(), 0.5, rng);
    std::vector<RateTarget> targets{RateTarget::network()};
    for (std::size_t l = 0; l < arch.n_layers(); ++l) targets.push_back(RateTarget::of_layer(l));
    for (auto target : targets) {
      auto g = grad_rate(p, arch, batch, target, soft);
      auto check = compare_with_fd(
          p, g, [&](const ModelParams& q) { return rate_value(q, arch, batch, target, SpikeMode::soft); });
      EXPECT_LT(check.max_rel, 1e-4) << "trial " << trial;
    }
  }
}

TEST(GradRate, SilentNetworkHasTinyGradient) {
  dpsnn::Rng rng(7);
  auto arch = NetworkArch::dense({20, 8, 4}, 50);
  ModelParams p(arch);
  for (std::size_t l = 0; l < p.n_layers(); ++l)
    for (auto& b : p.biases(l)) b = -2.0;
  auto batch = test::bernoulli_spikes(4, 50, 20, 0.3, rng);
  auto g = grad_rate(p, arch, batch, RateTarget::network());
  double n2 = 0.0;
  for (double v : g) n2 += v * v;
  EXPECT_LT(std::sqrt(n2), 1e-3);
  EXPECT_GT(std::sqrt(n2), 0.0);
}

TEST(GradRate, LayerTargetIgnoresDownstreamParameters) {
  dpsnn::Rng rng(8);
  auto arch = NetworkArch::dense({10, 8, 6, 3}, 20);
  auto p = ModelParams::random(arch, rng, 3.0);
  auto batch = test::bernoulli_spikes(3, 20, 10, 0.3, rng);
  auto g = grad_rate(p, arch, batch, RateTarget::of_layer(0));
  for (std::size_t l = 1; l < p.n_layers(); ++l) {
    const auto& blk = p.block(l);
    for (std::size_t k = blk.offset; k < blk.offset + blk.size(); ++k) EXPECT_EQ(g[k], 0.0);
  }
  double upstream = 0.0;
  for (std::size_t k = 0; k < p.block(0).size(); ++k) upstream += std::abs(g[k]);
  EXPECT_GT(upstream, 0.0);
}

TEST(GradRate, Deterministic) {
  dpsnn::Rng rng(9);
  auto arch = NetworkArch::dense({10, 8, 3}, 20);
  auto p = ModelParams::random(arch, rng, 3.0);
  auto batch = test::bernoulli_spikes(3, 20, 10, 0.3, rng);
  EXPECT_EQ(grad_rate(p, arch, batch, RateTarget::network()), grad_rate(p, arch, batch, RateTarget::network()));
}
