#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpsnn/errors.hpp"
#include "dpsnn/round_log.hpp"

namespace dpsnn {

struct Ci95 {
  double mean = 0.0;
  double half_width = 0.0;
  std::size_t n = 0;
};

/// Normal-approximation interval over the given values: mean +- 1.96 s / sqrt(n), with s the
/// sample standard deviation (half width 0 for a single value).
inline Ci95 ci95(std::span<const double> values) {
  if (values.empty()) throw ConfigError("ci95: no values");
  Ci95 ci;
  ci.n = values.size();
  for (double v : values) ci.mean += v;
  ci.mean /= static_cast<double>(ci.n);
  if (ci.n < 2) return ci;
  double ss = 0.0;
  for (double v : values) ss += (v - ci.mean) * (v - ci.mean);
  ci.half_width = 1.96 * std::sqrt(ss / static_cast<double>(ci.n - 1)) / std::sqrt(static_cast<double>(ci.n));
  return ci;
}

inline double rmse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("rmse: length mismatch");
  if (a.empty()) throw ConfigError("rmse: no aligned pairs");
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(ss / static_cast<double>(a.size()));
}

/// Tie-aware Kendall rank correlation (tau-b) of two paired score vectors. NaN when either side
/// is constant.
inline double kendall_tau_b(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ConfigError("kendall_tau: length mismatch");
  if (x.size() < 2) throw ConfigError("kendall_tau: need at least 2 items");
  double concordant = 0.0, discordant = 0.0, tie_x = 0.0, tie_y = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0.0 && dy == 0.0) continue;
      if (dx == 0.0) {
        tie_x += 1.0;
      } else if (dy == 0.0) {
        tie_y += 1.0;
      } else if ((dx > 0) == (dy > 0)) {
        concordant += 1.0;
      } else {
        discordant += 1.0;
      }
    }
  const double denom = std::sqrt((concordant + discordant + tie_x) * (concordant + discordant + tie_y));
  if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return (concordant - discordant) / denom;
}

/// Kendall tau between two orderings of the same ids (first = highest rank).
inline double kendall_tau(const std::vector<std::size_t>& ranking_a, const std::vector<std::size_t>& ranking_b) {
  if (ranking_a.size() != ranking_b.size()) throw ConfigError("kendall_tau: mismatched id sets");
  std::map<std::size_t, double> pos_b;
  for (std::size_t i = 0; i < ranking_b.size(); ++i) pos_b[ranking_b[i]] = static_cast<double>(i);
  if (pos_b.size() != ranking_b.size()) throw ConfigError("kendall_tau: duplicate ids");
  std::vector<double> x, y;
  for (std::size_t i = 0; i < ranking_a.size(); ++i) {
    const auto it = pos_b.find(ranking_a[i]);
    if (it == pos_b.end()) throw ConfigError("kendall_tau: mismatched id sets");
    x.push_back(static_cast<double>(i));
    y.push_back(it->second);
  }
  return kendall_tau_b(x, y);
}

enum class RateMetric { network_rate, layer_rates, activation_sparsity, footprint };

inline std::string to_string(RateMetric m) {
  switch (m) {
    case RateMetric::network_rate: return "r_k";
    case RateMetric::layer_rates: return "r_layer";
    case RateMetric::activation_sparsity: return "AS";
    case RateMetric::footprint: return "FP";
  }
  return "?";
}

struct MetricSummary {
  double value = 0.0;           // pooled over every aligned (round, client) pair
  Ci95 per_round;               // interval over per-round values
  std::vector<double> rounds;   // per-round values
  std::size_t pairs = 0;
};

namespace detail {

/// (round, client) -> record for one run.
inline std::map<std::pair<std::size_t, std::size_t>, const ClientRecord*> index_records(
    const std::vector<RoundLog>& run) {
  std::map<std::pair<std::size_t, std::size_t>, const ClientRecord*> out;
  for (const auto& log : run)
    for (const auto& c : log.clients) out[{log.round, c.id}] = &c;
  return out;
}

inline double scalar_field(const ClientRecord& c, RateMetric m) {
  switch (m) {
    case RateMetric::network_rate: return c.network_rate;
    case RateMetric::activation_sparsity: return c.activation_sparsity;
    case RateMetric::footprint: return static_cast<double>(c.footprint_bytes);
    default: break;
  }
  throw ConfigError("scalar_field: layer metric has no scalar value");
}

/// RMSE of one field over a set of aligned pairs; for layer rates, RMSE per layer and then the
/// unweighted mean across layers.
inline double rmse_over(const std::vector<std::pair<const ClientRecord*, const ClientRecord*>>& pairs,
                        RateMetric m) {
  if (m != RateMetric::layer_rates) {
    std::vector<double> a, b;
    for (const auto& [t, r] : pairs) {
      a.push_back(scalar_field(*t, m));
      b.push_back(scalar_field(*r, m));
    }
    return rmse(a, b);
  }
  const std::size_t L = pairs.front().first->layer_rates.size();
  double total = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<double> a, b;
    for (const auto& [t, r] : pairs) {
      if (t->layer_rates.size() != L || r->layer_rates.size() != L) throw ConfigError("rmse: layer count mismatch");
      a.push_back(t->layer_rates[l]);
      b.push_back(r->layer_rates[l]);
    }
    total += rmse(a, b);
  }
  return total / static_cast<double>(L);
}

}  // namespace detail

/// RMSE of a per-client statistic between a treatment run and its paired reference, aligned on
/// (round, client id). Aborted records are excluded.
inline MetricSummary rmse_metric(const std::vector<RoundLog>& treatment, const std::vector<RoundLog>& reference,
                                 RateMetric m) {
  const auto ref = detail::index_records(reference);
  std::map<std::size_t, std::vector<std::pair<const ClientRecord*, const ClientRecord*>>> by_round;
  std::vector<std::pair<const ClientRecord*, const ClientRecord*>> all;
  for (const auto& log : treatment)
    for (const auto& c : log.clients) {
      const auto it = ref.find({log.round, c.id});
      if (it == ref.end() || c.aborted || it->second->aborted) continue;
      by_round[log.round].emplace_back(&c, it->second);
      all.emplace_back(&c, it->second);
    }
  if (all.empty()) throw ConfigError("rmse_metric: no aligned (round, client) pairs");
  MetricSummary s;
  s.pairs = all.size();
  s.value = detail::rmse_over(all, m);
  for (const auto& [round, pairs] : by_round) s.rounds.push_back(detail::rmse_over(pairs, m));
  s.per_round = ci95(s.rounds);
  return s;
}

struct LambdaDeviation {
  double mean = std::numeric_limits<double>::quiet_NaN();  // NaN without aligned events
  double sum = 0.0;
  double percent = std::numeric_limits<double>::quiet_NaN();  // 100 * mean (lambda is a fraction of the update)
  std::size_t events = 0;     // aligned: the client was aggregated in the same round of both runs
  std::size_t unmatched = 0;  // aggregated in one run only
  Ci95 per_round;
};

/// |lambda_treatment - lambda_reference| over aligned aggregation events, i.e. (round, client)
/// pairs aggregated in both runs.
inline LambdaDeviation lambda_deviation(const std::vector<RoundLog>& treatment, const std::vector<RoundLog>& reference) {
  auto check = [](const std::vector<RoundLog>& run) {
    for (const auto& log : run)
      if (log.protocol.rfind("RateW/", 0) != 0)
        throw ConfigError("lambda_deviation: protocol mismatch (" + log.protocol + " is not rate-weighted)");
  };
  check(treatment);
  check(reference);
  std::map<std::pair<std::size_t, std::size_t>, std::pair<std::optional<double>, std::optional<double>>> events;
  for (const auto& log : treatment)
    for (const auto& c : log.clients)
      if (c.lambda) events[{log.round, c.id}].first = *c.lambda;
  for (const auto& log : reference)
    for (const auto& c : log.clients)
      if (c.lambda) events[{log.round, c.id}].second = *c.lambda;
  LambdaDeviation d;
  std::map<std::size_t, std::pair<double, std::size_t>> rounds;
  for (const auto& [key, v] : events) {
    if (!v.first || !v.second) {
      ++d.unmatched;
      continue;
    }
    const double dev = std::abs(*v.first - *v.second);
    d.sum += dev;
    ++d.events;
    rounds[key.first].first += dev;
    ++rounds[key.first].second;
  }
  if (d.events == 0) return d;
  d.mean = d.sum / static_cast<double>(d.events);
  d.percent = 100.0 * d.mean;
  std::vector<double> per_round;
  for (const auto& [r, v] : rounds) per_round.push_back(v.first / static_cast<double>(v.second));
  d.per_round = ci95(per_round);
  return d;
}

struct RankingStability {
  Ci95 tau;
  std::vector<double> rounds;  // defined rounds only
  std::size_t undefined_rounds = 0;
};

/// Per-round tau-b between the Delta-R scores of the two runs over clients that trained in both,
/// then averaged across rounds. Rounds where either side is constant are skipped and counted.
inline RankingStability ranking_stability(const std::vector<RoundLog>& treatment, const std::vector<RoundLog>& reference) {
  const auto ref = detail::index_records(reference);
  RankingStability s;
  for (const auto& log : treatment) {
    std::vector<double> a, b;
    for (const auto& c : log.clients) {
      const auto it = ref.find({log.round, c.id});
      if (it == ref.end() || c.aborted || it->second->aborted || c.local_steps == 0 || it->second->local_steps == 0)
        continue;
      a.push_back(c.delta_r);
      b.push_back(it->second->delta_r);
    }
    const double tau = a.size() >= 2 ? kendall_tau_b(a, b) : std::numeric_limits<double>::quiet_NaN();
    if (std::isnan(tau))
      ++s.undefined_rounds;
    else
      s.rounds.push_back(tau);
  }
  if (s.rounds.empty()) throw ConfigError("ranking_stability: no round with a defined ranking");
  s.tau = ci95(s.rounds);
  return s;
}

}  // namespace dpsnn
