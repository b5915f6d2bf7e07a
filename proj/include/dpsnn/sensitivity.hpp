#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <thread>
#include <vector>

#include "dpsnn/bptt.hpp"
#include "dpsnn/dataset.hpp"
#include "dpsnn/dp_engine.hpp"
#include "dpsnn/errors.hpp"
#include "dpsnn/lif.hpp"
#include "dpsnn/model_params.hpp"
#include "dpsnn/rng.hpp"

namespace dpsnn {

/// First-order forecast of the DP-induced change of a rate functional r after `steps` local
/// DP-SGD steps started at a non-DP reference point.
struct RatePerturbationForecast {
  double predicted_mean_shift = 0.0;
  double predicted_variance = 0.0;
  double lr_sum = 0.0;
  double lr_sq_sum = 0.0;
  std::vector<double> clip_gap_projection;  // grad_r . (clipped mean - mean), per probe batch
  std::vector<double> grad_r;
};

struct ForecastOptions {
  RateTarget target = RateTarget::network();
  BackwardOptions backward{};
  std::size_t batch_size = 0;  // B in the noise scale; 0: size of the first probe batch
};

/// Mean shift   -(sum eta_t) * grad_r . mean_t(gbar^C_t - gbar_t)
/// Variance     sum eta_t^2 * sum_blocks |grad_r|_block|^2 * s_block^2
/// with s_block = sigma C / B the per-coordinate noise scale of each parameter block. All
/// gradients are taken at `theta_star`; `probe_batches[t % n]` supplies the gap of step t and
/// the rate gradient is measured on `rate_batch`.
inline RatePerturbationForecast forecast_rate_perturbation(const ModelParams& theta_star, const NetworkArch& arch,
                                                           const std::vector<LabeledSpikes>& probe_batches,
                                                           const SpikeTensor& rate_batch, const DpConfig& dp,
                                                           const std::vector<double>& lrs, std::size_t steps,
                                                           const ForecastOptions& opts = {}) {
  if (probe_batches.empty()) throw ConfigError("forecast: no probe batch");
  for (const auto& b : probe_batches)
    if (b.empty()) throw ConfigError("forecast: empty probe batch");
  if (rate_batch.empty()) throw ConfigError("forecast: empty rate batch");
  if (steps < 1) throw ConfigError("forecast: steps must be >= 1");
  if (lrs.empty()) throw ConfigError("forecast: empty learning-rate schedule");

  RatePerturbationForecast out;
  for (std::size_t t = 0; t < steps; ++t) {
    const double eta = lrs[std::min(t, lrs.size() - 1)];
    out.lr_sum += eta;
    out.lr_sq_sum += eta * eta;
  }
  out.grad_r = grad_rate(theta_star, arch, rate_batch, opts.target, opts.backward);
  const auto offsets = theta_star.block_offsets();

  const std::size_t n_gaps = std::min(steps, probe_batches.size());
  double gap_sum = 0.0;
  for (std::size_t t = 0; t < n_gaps; ++t) {
    const auto per_sample = backward_loss(theta_star, arch, probe_batches[t], opts.backward);
    const auto plain = per_sample.mean();
    const auto clipped = clipped_mean(per_sample, dp.clip_c, dp.clip_mode, offsets);
    double proj = 0.0;
    for (std::size_t k = 0; k < plain.size(); ++k) proj += out.grad_r[k] * (clipped[k] - plain[k]);
    out.clip_gap_projection.push_back(proj);
    gap_sum += proj;
  }
  out.predicted_mean_shift = -out.lr_sum * gap_sum / static_cast<double>(n_gaps);

  const std::size_t B = opts.batch_size ? opts.batch_size : probe_batches.front().size();
  const double s = noise_std(dp, B);
  double var = 0.0;
  for (std::size_t blk = 0; blk + 1 < offsets.size(); ++blk) {
    double g2 = 0.0;
    for (std::size_t k = offsets[blk]; k < offsets[blk + 1]; ++k) g2 += out.grad_r[k] * out.grad_r[k];
    var += g2 * s * s;
  }
  out.predicted_variance = out.lr_sq_sum * var;
  return out;
}

struct MonteCarloOptions {
  RateTarget target = RateTarget::network();
  BackwardOptions backward{};
  bool poisson = false;  // false: every step uses the full training set
  std::size_t workers = 1;
};

struct MonteCarloRate {
  double mean = 0.0;
  double variance = 0.0;
  double mean_ci95 = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0;
  std::vector<double> values;  // per draw, NaN for excluded draws
};

namespace detail {

inline double mc_draw(const ModelParams& theta_star, const NetworkArch& arch, const LabeledSpikes& train,
                      const SpikeTensor& eval_batch, const DpConfig& dp, const std::vector<double>& lrs,
                      std::size_t steps, std::uint64_t master_seed, std::size_t draw, const MonteCarloOptions& opts) {
  ModelParams p = theta_star;
  const auto offsets = p.block_offsets();
  for (std::size_t t = 0; t < steps; ++t) {
    const double eta = lrs[std::min(t, lrs.size() - 1)];
    PerSampleGrads g;
    if (opts.poisson) {
      auto pick = make_stream(master_seed, Stream::batching, draw, t);
      const auto idx = poisson_sample(train.size(), dp.sample_rate, pick);
      if (idx.empty()) continue;
      g = backward_loss(p, arch, train.subset(idx), opts.backward);
    } else {
      g = backward_loss(p, arch, train, opts.backward);
    }
    auto noise = make_stream(master_seed, Stream::dp_noise, draw, t);
    const auto step = dp_sgd_step(g, dp, noise, offsets);
    p.axpy(-eta, step.gradient);
    if (!p.all_finite()) return std::nan("");
  }
  return rate_value(p, arch, eval_batch, opts.target, opts.backward.mode);
}

}  // namespace detail

/// Runs `draws` independent DP-SGD trajectories from `theta_star` and reports the sample mean and
/// variance of r on `eval_batch`. Draw d uses substreams keyed by (master_seed, d, step), so the
/// result does not depend on the worker count. Draws whose parameters turn non-finite are
/// excluded and counted.
inline MonteCarloRate monte_carlo_rate(const ModelParams& theta_star, const NetworkArch& arch,
                                       const LabeledSpikes& train, const SpikeTensor& eval_batch, const DpConfig& dp,
                                       const std::vector<double>& lrs, std::size_t steps, std::size_t draws,
                                       std::uint64_t master_seed, const MonteCarloOptions& opts = {}) {
  if (draws < 2) throw ConfigError("monte_carlo_rate: need at least 2 draws");
  if (lrs.empty()) throw ConfigError("monte_carlo_rate: empty learning-rate schedule");
  if (train.empty() || eval_batch.empty()) throw ConfigError("monte_carlo_rate: empty data");
  MonteCarloRate out;
  out.values.assign(draws, 0.0);
  const std::size_t workers = std::max<std::size_t>(1, std::min(opts.workers, draws));
  auto run = [&](std::size_t w) {
    for (std::size_t d = w; d < draws; d += workers)
      out.values[d] = detail::mc_draw(theta_star, arch, train, eval_batch, dp, lrs, steps, master_seed, d, opts);
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& th : pool) th.join();
  }
  double sum = 0.0;
  for (double v : out.values) {
    if (std::isnan(v)) {
      ++out.excluded;
      continue;
    }
    sum += v;
    ++out.used;
  }
  if (out.used < 2) throw NumericError("monte_carlo_rate: fewer than 2 finite draws");
  out.mean = sum / static_cast<double>(out.used);
  double ss = 0.0;
  for (double v : out.values)
    if (!std::isnan(v)) ss += (v - out.mean) * (v - out.mean);
  out.variance = ss / static_cast<double>(out.used - 1);
  out.mean_ci95 = 1.96 * std::sqrt(out.variance / static_cast<double>(out.used));
  return out;
}

struct ProbeConfig {
  double d_mu = -1.0;   // < 0: 0.01 * v_th
  double d_var = -1.0;  // < 0: 0.1 * var + 1e-4
  double d_vth = -1.0;  // < 0: 0.01 * v_th
  std::size_t horizon = 200;
  std::size_t trials = 200;
};

struct OperatingPointSensitivity {
  double rate = 0.0;
  double rate_se = 0.0;
  double d_r_d_mu = 0.0, d_r_d_mu_se = 0.0;
  double d_r_d_var = 0.0, d_r_d_var_se = 0.0;
  double d_r_d_vth = 0.0, d_r_d_vth_se = 0.0;
  bool var_forward_difference = false;
  ProbeConfig probe_config;  // resolved step sizes
};

/// Fraction of `noise.size()` steps on which a single LIF neuron spikes under input current
/// mu + sqrt(var) * noise[t].
inline double single_neuron_rate(const LifConfig& lif, double mu, double var, std::span<const double> noise) {
  const double sd = std::sqrt(var);
  const double beta = lif.beta_init;
  double u = lif.v_rest;
  int refr = 0;
  std::size_t spikes = 0;
  for (double xi : noise) {
    const auto r = lif_neuron_update(u, mu + sd * xi, lif, beta, refr);
    u = r.post;
    if (r.spike) ++spikes;
  }
  return static_cast<double>(spikes) / static_cast<double>(noise.size());
}

/// Simulated sensitivities of the firing rate of one LIF neuron (decay beta_init) driven by
/// i.i.d. N(mu, var) input current. Each trial draws one standard-normal sequence and reuses it
/// for every perturbed evaluation (common random numbers). Partials are central differences;
/// the variance partial falls back to a forward difference when var - d_var < 0.
inline OperatingPointSensitivity operating_point_sensitivity(const LifConfig& lif, double mu, double var,
                                                             std::uint64_t seed, ProbeConfig probe = {}) {
  if (!(var >= 0.0)) throw ConfigError("operating_point_sensitivity: variance must be >= 0");
  if (!std::isfinite(mu)) throw ConfigError("operating_point_sensitivity: non-finite drive mean");
  lif.validate();
  if (probe.horizon < 1 || probe.trials < 2) throw ConfigError("operating_point_sensitivity: need horizon >= 1, trials >= 2");
  if (probe.d_mu < 0.0) probe.d_mu = 0.01 * lif.v_th;
  if (probe.d_var < 0.0) probe.d_var = 0.1 * var + 1e-4;
  if (probe.d_vth < 0.0) probe.d_vth = 0.01 * lif.v_th;

  OperatingPointSensitivity out;
  out.var_forward_difference = var - probe.d_var < 0.0;
  out.probe_config = probe;
  const double n = static_cast<double>(probe.trials);
  std::vector<double> noise(probe.horizon);
  double s[4] = {0, 0, 0, 0}, s2[4] = {0, 0, 0, 0};
  auto acc = [&](int k, double v) {
    s[k] += v;
    s2[k] += v * v;
  };
  for (std::size_t i = 0; i < probe.trials; ++i) {
    auto rng = make_stream(seed, Stream::probe, i);
    std::normal_distribution<double> z(0.0, 1.0);
    for (auto& x : noise) x = z(rng);
    const double r0 = single_neuron_rate(lif, mu, var, noise);
    acc(0, r0);
    acc(1, (single_neuron_rate(lif, mu + probe.d_mu, var, noise) - single_neuron_rate(lif, mu - probe.d_mu, var, noise)) /
               (2.0 * probe.d_mu));
    if (out.var_forward_difference)
      acc(2, (single_neuron_rate(lif, mu, var + probe.d_var, noise) - r0) / probe.d_var);
    else
      acc(2, (single_neuron_rate(lif, mu, var + probe.d_var, noise) - single_neuron_rate(lif, mu, var - probe.d_var, noise)) /
                 (2.0 * probe.d_var));
    LifConfig up = lif, down = lif;
    up.v_th += probe.d_vth;
    down.v_th -= probe.d_vth;
    acc(3, (single_neuron_rate(up, mu, var, noise) - single_neuron_rate(down, mu, var, noise)) / (2.0 * probe.d_vth));
  }
  double mean[4], se[4];
  for (int k = 0; k < 4; ++k) {
    mean[k] = s[k] / n;
    const double v = std::max(0.0, (s2[k] - n * mean[k] * mean[k]) / (n - 1.0));
    se[k] = std::sqrt(v / n);
  }
  out.rate = mean[0];
  out.rate_se = se[0];
  out.d_r_d_mu = mean[1];
  out.d_r_d_mu_se = se[1];
  out.d_r_d_var = mean[2];
  out.d_r_d_var_se = se[2];
  out.d_r_d_vth = mean[3];
  out.d_r_d_vth_se = se[3];
  return out;
}

}  // namespace dpsnn
