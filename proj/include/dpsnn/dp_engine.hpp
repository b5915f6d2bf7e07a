#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dpsnn/bptt.hpp"
#include "dpsnn/errors.hpp"
#include "dpsnn/rng.hpp"

namespace dpsnn {

enum class ClipMode { global, per_layer };

/// Example-level DP-SGD settings for one client. `sigma` is normally the calibrated output of
/// the accountant; `sigma_override` pins it instead.
struct DpConfig {
  bool enabled = false;
  double epsilon = 8.0;
  double delta = 1e-5;
  double clip_c = 1.0;
  double sigma = 1.0;
  double sample_rate = 1.0;
  std::uint64_t total_steps = 1;
  ClipMode clip_mode = ClipMode::global;
  bool sigma_override = false;
  bool poisson = true;  // false: fixed-size shuffled batches (debug, accounting not valid)

  void validate() const {
    if (!enabled) return;
    if (!(epsilon > 0.0)) throw ConfigError("DpConfig: epsilon must be > 0");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("DpConfig: delta must lie in (0, 1)");
    if (!(clip_c > 0.0)) throw ConfigError("DpConfig: clip bound C must be > 0");
    if (!(sigma >= 0.0)) throw ConfigError("DpConfig: sigma must be >= 0");
    if (!(sample_rate > 0.0 && sample_rate <= 1.0)) throw ConfigError("DpConfig: sample rate must lie in (0, 1]");
    if (total_steps < 1) throw ConfigError("DpConfig: total_steps must be >= 1");
  }
};

/// Clipping diagnostics of one noisy step.
struct NoisySummary {
  std::vector<double> pre_clip_norms;
  double clipped_fraction = 0.0;
  std::uint64_t noise_seed = 0;
};

inline double l2_norm(std::span<const double> g) {
  double s = 0.0;
  for (double v : g) s += v * v;
  return std::sqrt(s);
}

/// Scales `g` in place to norm at most `c` (exactly, as measured by l2_norm); returns the pre-clip norm.
inline double clip_in_place(std::span<double> g, double c) {
  if (!(c > 0.0)) throw ConfigError("clip: bound must be > 0");
  const double n = l2_norm(g);
  if (n > c) {
    std::vector<double> orig(g.begin(), g.end());
    double s = c / n;
    for (;;) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = orig[i] * s;
      if (l2_norm(g) <= c) break;
      s = std::nextafter(s, 0.0);
    }
  }
  return n;
}

inline std::vector<double> clip(std::span<const double> g, double c) {
  std::vector<double> out(g.begin(), g.end());
  clip_in_place(out, c);
  return out;
}

/// Per-layer clip bounds: C split equally in L2 over `n_blocks` blocks.
inline double per_layer_bound(double c, std::size_t n_blocks) { return c / std::sqrt(static_cast<double>(n_blocks)); }

/// Per-coordinate noise standard deviation sigma * C / B for a realized batch of size `batch`.
inline double noise_std(const DpConfig& cfg, std::size_t batch) {
  if (batch == 0) throw ConfigError("dp_sgd_step: empty minibatch (B = 0)");
  return cfg.sigma * cfg.clip_c / static_cast<double>(batch);
}

/// Poisson subsampling: each index in [0, n) is kept independently with probability q.
inline std::vector<std::size_t> poisson_sample(std::size_t n, double q, Rng& rng) {
  std::bernoulli_distribution keep(q);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (keep(rng)) out.push_back(i);
  return out;
}

struct DpStep {
  std::vector<double> gradient;
  NoisySummary summary;
};

/// Mean of clipped per-sample gradients, without noise. In per-layer mode each block delimited
/// by `block_offsets` is clipped to C / sqrt(#blocks).
inline std::vector<double> clipped_mean(const PerSampleGrads& per_sample, double c, ClipMode mode,
                                        std::span<const std::size_t> block_offsets, NoisySummary* summary = nullptr) {
  if (per_sample.count == 0) throw ConfigError("dp_sgd_step: empty minibatch (B = 0)");
  if (mode == ClipMode::per_layer && block_offsets.size() < 2)
    throw ConfigError("dp_sgd_step: per-layer clipping needs block offsets");
  const std::size_t d = per_sample.dim;
  std::vector<double> sum(d, 0.0), row(d);
  std::size_t clipped = 0;
  if (summary) summary->pre_clip_norms.clear();
  for (std::size_t i = 0; i < per_sample.count; ++i) {
    auto src = per_sample.row(i);
    std::copy(src.begin(), src.end(), row.begin());
    const double norm = l2_norm(row);
    bool was_clipped = false;
    if (mode == ClipMode::global) {
      was_clipped = norm > c;
      clip_in_place(row, c);
    } else {
      const std::size_t nb = block_offsets.size() - 1;
      const double cb = per_layer_bound(c, nb);
      for (std::size_t b = 0; b < nb; ++b) {
        std::span<double> blk(row.data() + block_offsets[b], block_offsets[b + 1] - block_offsets[b]);
        if (clip_in_place(blk, cb) > cb) was_clipped = true;
      }
    }
    if (was_clipped) ++clipped;
    if (summary) summary->pre_clip_norms.push_back(norm);
    for (std::size_t k = 0; k < d; ++k) sum[k] += row[k];
  }
  for (auto& v : sum) v /= static_cast<double>(per_sample.count);
  if (summary) summary->clipped_fraction = static_cast<double>(clipped) / static_cast<double>(per_sample.count);
  return sum;
}

/// Noisy minibatch gradient: mean_i clip_C(g_i) + (sigma C / B) xi with xi ~ N(0, I), B the
/// realized batch size. Noise is drawn from `noise_rng`, which callers key by (client, step).
inline DpStep dp_sgd_step(const PerSampleGrads& per_sample, const DpConfig& cfg, Rng& noise_rng,
                          std::span<const std::size_t> block_offsets = {}, std::uint64_t noise_seed = 0) {
  if (!cfg.enabled) throw ConfigError("dp_sgd_step: DP is disabled in this config");
  cfg.validate();
  DpStep out;
  out.summary.noise_seed = noise_seed;
  out.gradient = clipped_mean(per_sample, cfg.clip_c, cfg.clip_mode, block_offsets, &out.summary);
  const double std_dev = noise_std(cfg, per_sample.count);
  if (std_dev > 0.0) {
    std::normal_distribution<double> xi(0.0, 1.0);
    for (auto& v : out.gradient) v += std_dev * xi(noise_rng);
  }
  return out;
}

}  // namespace dpsnn
