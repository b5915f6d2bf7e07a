#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dpsnn/accountant.hpp"
#include "dpsnn/bptt.hpp"
#include "dpsnn/dataset.hpp"
#include "dpsnn/dp_engine.hpp"
#include "dpsnn/errors.hpp"
#include "dpsnn/model_params.hpp"
#include "dpsnn/optim.hpp"
#include "dpsnn/rate_metrics.hpp"
#include "dpsnn/rng.hpp"
#include "dpsnn/round_log.hpp"

namespace dpsnn {

// ---------------------------------------------------------------------------------------------
// Partitioning

/// proportions[c][k]: share of class c assigned to client k, drawn from Dir(alpha * 1_K).
inline std::vector<std::vector<double>> dirichlet_proportions(std::size_t n_classes, std::size_t k_clients,
                                                              double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw ConfigError("dirichlet_partition: alpha must be > 0");
  if (k_clients < 1) throw ConfigError("dirichlet_partition: K must be >= 1");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<std::vector<double>> props(n_classes, std::vector<double>(k_clients));
  for (auto& p : props) {
    double sum = 0.0;
    for (auto& v : p) sum += (v = gamma(rng));
    if (!(sum > 0.0)) {
      // Every draw underflowed (tiny alpha): the limit puts the whole class on one client.
      std::fill(p.begin(), p.end(), 0.0);
      p[std::uniform_int_distribution<std::size_t>(0, k_clients - 1)(rng)] = 1.0;
      continue;
    }
    for (auto& v : p) v /= sum;
  }
  return props;
}

/// Largest-remainder counts: floor(p_k * n) plus one extra for the largest fractional parts
/// (ties to the lower client id).
inline std::vector<std::size_t> largest_remainder(std::span<const double> p, std::size_t n) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> frac;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double exact = p[k] * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[k];
    frac.emplace_back(exact - std::floor(exact), k);
  }
  std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[frac[i % frac.size()].second];
  return counts;
}

/// Assigns the samples of every class to clients by `props`. Within a class, sample order is
/// shuffled with `rng` before splitting. Output index lists are sorted.
inline std::vector<std::vector<std::size_t>> split_by_proportions(std::span<const int> labels, std::size_t n_classes,
                                                                  const std::vector<std::vector<double>>& props,
                                                                  Rng& rng) {
  const std::size_t K = props.front().size();
  std::vector<std::vector<std::size_t>> by_class(n_classes), shards(K);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto& idx = by_class[c];
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto counts = largest_remainder(props[c], idx.size());
    std::size_t pos = 0;
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < counts[k]; ++j) shards[k].push_back(idx[pos++]);
  }
  for (auto& s : shards) std::sort(s.begin(), s.end());
  return shards;
}

struct Partition {
  std::vector<std::vector<double>> proportions;
  std::vector<std::vector<std::size_t>> train;
  std::vector<std::vector<std::size_t>> val;
  std::size_t attempts = 0;
};

/// Class-conditional Dirichlet split of `train` (and of `val` with the same proportions). The
/// whole draw is repeated if any client would receive an empty training or validation shard.
inline Partition dirichlet_partition(const LabeledSpikes& train, const LabeledSpikes* val, std::size_t k_clients,
                                     double alpha, Rng& rng, std::size_t max_retries = 100) {
  const auto hist = train.class_histogram();
  for (std::size_t c = 0; c < hist.size(); ++c)
    if (hist[c] == 0) throw ConfigError("dirichlet_partition: class " + std::to_string(c) + " has no samples");
  for (std::size_t attempt = 1; attempt <= max_retries; ++attempt) {
    Partition p;
    p.attempts = attempt;
    p.proportions = dirichlet_proportions(train.n_classes, k_clients, alpha, rng);
    p.train = split_by_proportions(train.labels, train.n_classes, p.proportions, rng);
    if (val) p.val = split_by_proportions(val->labels, val->n_classes, p.proportions, rng);
    bool ok = true;
    for (std::size_t k = 0; k < k_clients; ++k)
      if (p.train[k].empty() || (val && p.val[k].empty())) ok = false;
    if (ok) return p;
  }
  throw ConfigError("dirichlet_partition: some client stayed empty after " + std::to_string(max_retries) +
                    " draws; use a larger alpha or fewer clients");
}

inline std::vector<std::vector<std::size_t>> dirichlet_partition(const LabeledSpikes& data, std::size_t k_clients,
                                                                 double alpha, Rng& rng) {
  return dirichlet_partition(data, nullptr, k_clients, alpha, rng).train;
}

// ---------------------------------------------------------------------------------------------
// Clients and local training

struct ClientState {
  std::size_t id = 0;
  LabeledSpikes train;
  LabeledSpikes val;
  DpConfig dp;
  std::size_t staleness = 0;
  std::size_t steps_taken = 0;  // local steps so far, for accounting

  std::size_t n_samples() const { return train.size(); }
};

/// Per-client DP parameters: delta = 1/N_k, q = min(1, B/N_k), steps = E * R * ceil(N_k/B), and
/// sigma calibrated to `base.epsilon` unless `base.sigma_override`.
inline DpConfig configure_client_dp(const DpConfig& base, std::size_t n_k, std::size_t batch, std::size_t epochs,
                                    std::size_t rounds) {
  DpConfig dp = base;
  if (!dp.enabled) return dp;
  if (n_k < 2) throw ConfigError("DP client needs at least 2 samples (delta = 1/N_k)");
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  dp.delta = 1.0 / static_cast<double>(n_k);
  dp.sample_rate = std::min(1.0, static_cast<double>(batch) / static_cast<double>(n_k));
  const std::size_t per_epoch = (n_k + batch - 1) / batch;
  dp.total_steps = std::max<std::size_t>(1, epochs * rounds * per_epoch);
  if (!dp.sigma_override) dp.sigma = calibrate_sigma(dp.epsilon, dp.delta, dp.sample_rate, dp.total_steps);
  dp.validate();
  return dp;
}

struct LocalTrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  AdamConfig adam{};
  BackwardOptions backward{};
  double prune_threshold = 1e-6;
};

struct LocalResult {
  ModelParams params;
  Evaluation val_eval;
  std::size_t steps = 0;
  std::size_t skipped_steps = 0;
  double clipped_fraction = 0.0;
  double train_accuracy = 0.0;
  bool aborted = false;
  std::string error;
};

namespace detail {

struct BatchStats {
  double loss = 0.0;
  std::size_t correct = 0;
};

/// Per-sample gradients (rows of `out`) for `idx`, with loss and count-argmax predictions.
inline BatchStats per_sample_grads(BpttEngine& eng, const ModelParams& params, const LabeledSpikes& data,
                                   std::span<const std::size_t> idx, PerSampleGrads& out) {
  out = PerSampleGrads(idx.size(), params.size());
  BatchStats st;
  std::vector<std::vector<double>> seeds;
  std::vector<double> probs;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto input = data.sample(idx[i]);
    const int y = data.labels[idx[i]];
    eng.simulate(params, input);
    st.loss += softmax_cross_entropy(eng.trace().counts, y, probs);
    if (argmax(eng.trace().counts) == static_cast<std::size_t>(y)) ++st.correct;
    eng.loss_seeds(y, seeds);
    eng.backward(params, input, seeds, out.row(i));
  }
  return st;
}

/// Mean gradient over `idx` accumulated directly.
inline BatchStats mean_grad(BpttEngine& eng, const ModelParams& params, const LabeledSpikes& data,
                            std::span<const std::size_t> idx, std::vector<double>& grad) {
  grad.assign(params.size(), 0.0);
  BatchStats st;
  std::vector<std::vector<double>> seeds;
  std::vector<double> probs;
  const double scale = 1.0 / static_cast<double>(idx.size());
  for (std::size_t i : idx) {
    const auto input = data.sample(i);
    const int y = data.labels[i];
    eng.simulate(params, input);
    st.loss += softmax_cross_entropy(eng.trace().counts, y, probs);
    if (argmax(eng.trace().counts) == static_cast<std::size_t>(y)) ++st.correct;
    eng.loss_seeds(y, seeds);
    eng.backward(params, input, seeds, grad, scale);
  }
  return st;
}

}  // namespace detail

/// E epochs of Adam from `global`. Without DP, each epoch visits a seeded permutation of the shard
/// in batches of B. With DP, each epoch runs ceil(N_k/B) Poisson-subsampled steps and the noisy
/// clipped gradient feeds Adam; empty draws are skipped (and still counted for accounting).
/// Streams are keyed by (master_seed, round, client id, step).
inline LocalResult local_train(const ClientState& client, const ModelParams& global, const NetworkArch& arch,
                               const LocalTrainConfig& cfg, std::uint64_t master_seed, std::size_t round) {
  if (client.train.empty()) throw ConfigError("local_train: client " + std::to_string(client.id) + " has no data");
  if (cfg.batch_size < 1) throw ConfigError("local_train: batch size must be >= 1");
  LocalResult res;
  res.params = global;
  BpttEngine eng(arch, cfg.backward);
  Adam adam(global.size(), cfg.adam);
  const std::size_t N = client.n_samples();
  const std::size_t B = cfg.batch_size;
  const auto offsets = global.block_offsets();
  std::vector<double> grad;
  PerSampleGrads per_sample;
  double clipped_sum = 0.0;
  std::size_t dp_steps = 0;
  try {
    std::size_t step = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      std::size_t correct = 0, seen = 0;
      if (!client.dp.enabled) {
        std::vector<std::size_t> order(N);
        std::iota(order.begin(), order.end(), 0);
        auto shuffle = make_stream(master_seed, Stream::batching, round, client.id, e);
        std::shuffle(order.begin(), order.end(), shuffle);
        for (std::size_t start = 0; start < N; start += B, ++step) {
          std::span<const std::size_t> idx(order.data() + start, std::min(B, N - start));
          const auto st = detail::mean_grad(eng, res.params, client.train, idx, grad);
          if (!std::isfinite(st.loss)) throw NumericError("non-finite loss at local step " + std::to_string(step));
          correct += st.correct;
          seen += idx.size();
          adam.step(res.params, grad);
          ++res.steps;
        }
      } else {
        const std::size_t per_epoch = (N + B - 1) / B;
        for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
          auto pick = make_stream(master_seed, Stream::batching, round, client.id, step);
          const auto idx = poisson_sample(N, client.dp.sample_rate, pick);
          ++res.steps;
          if (idx.empty()) {
            ++res.skipped_steps;
            continue;
          }
          const auto st = detail::per_sample_grads(eng, res.params, client.train, idx, per_sample);
          if (!std::isfinite(st.loss)) throw NumericError("non-finite loss at local step " + std::to_string(step));
          correct += st.correct;
          seen += idx.size();
          auto noise = make_stream(master_seed, Stream::dp_noise, round, client.id, step);
          const auto dp_step = dp_sgd_step(per_sample, client.dp, noise, offsets, step);
          clipped_sum += dp_step.summary.clipped_fraction;
          ++dp_steps;
          adam.step(res.params, dp_step.gradient);
        }
      }
      if (!res.params.all_finite()) throw NumericError("non-finite parameters after local epoch " + std::to_string(e));
      res.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    }
  } catch (const NumericError& err) {
    res.aborted = true;
    res.error = "client " + std::to_string(client.id) + ", round " + std::to_string(round) + ": " + err.what();
    res.params = global;
  }
  if (dp_steps) res.clipped_fraction = clipped_sum / static_cast<double>(dp_steps);
  const auto& held_out = client.val.empty() ? client.train : client.val;
  try {
    res.val_eval = evaluate(res.params, arch, held_out, cfg.prune_threshold);
  } catch (const NumericError& err) {
    if (!res.aborted) res.error = "client " + std::to_string(client.id) + ", round " + std::to_string(round) + ": " + err.what();
    res.aborted = true;
    res.val_eval = {};
    res.val_eval.rates.per_class.assign(held_out.n_classes, std::nullopt);
    res.val_eval.rates.per_layer.assign(arch.n_layers(), 0.0);
  }
  return res;
}

// ---------------------------------------------------------------------------------------------
// Aggregation and selection

/// Sample-size weighted mean of client parameters.
inline ModelParams fedavg(const std::vector<const ModelParams*>& params, const std::vector<std::size_t>& n_samples) {
  if (params.empty()) throw ConfigError("fedavg: no client updates");
  if (params.size() != n_samples.size()) throw ConfigError("fedavg: size list mismatch");
  const double total = static_cast<double>(std::accumulate(n_samples.begin(), n_samples.end(), std::size_t{0}));
  if (!(total > 0.0)) throw ConfigError("fedavg: total sample count is zero");
  ModelParams out = params.front()->zeros_like();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(out)) throw ConfigError("fedavg: parameter shape mismatch");
    out.axpy(static_cast<double>(n_samples[i]) / total, *params[i]);
  }
  // Identical inputs must come back unchanged, which the weighted sum only guarantees up to rounding.
  bool identical = true;
  for (std::size_t i = 1; i < params.size() && identical; ++i) identical = (*params[i] == *params[0]);
  if (identical) out = *params.front();
  return out;
}

inline constexpr double kDefaultSigmaMin = 1e-4;

struct RateWeights {
  std::vector<double> zeta;
  double mu = 0.0;
  double sigma = 0.0;  // after the floor
};

/// Gaussian kernel of each reporting rate around the round mean, with population std floored at
/// `sigma_min`.
inline RateWeights rate_weight(std::span<const double> rates, double sigma_min = kDefaultSigmaMin) {
  if (rates.empty()) throw ConfigError("rate_weight: no reporting clients");
  if (!(sigma_min > 0.0)) throw ConfigError("rate_weight: sigma_min must be > 0");
  RateWeights w;
  const double n = static_cast<double>(rates.size());
  for (double r : rates) w.mu += r;
  w.mu /= n;
  double ss = 0.0;
  for (double r : rates) ss += (r - w.mu) * (r - w.mu);
  w.sigma = std::max(std::sqrt(ss / n), sigma_min);
  const double amp = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * w.sigma);
  for (double r : rates) w.zeta.push_back(amp * std::exp(-(r - w.mu) * (r - w.mu) / (2.0 * w.sigma * w.sigma)));
  return w;
}

struct AggregationDecision {
  double zeta = 0.0;
  double beta = 1.0;  // staleness factor
  double psi = 0.0;   // size factor
  double lambda_raw = 0.0;
  double lambda = 0.0;
  bool clamped = false;
};

inline constexpr double kDefaultStalenessDecay = 0.5;

/// lambda = clamp(kappa * (s+1)^-a * (N_k / N) * zeta, 0, 1), applied as a convex mix of the
/// global model and the client update. Updates `global` in place.
inline AggregationDecision async_aggregate(ModelParams& global, const ModelParams& update, double zeta,
                                           std::size_t staleness, std::size_t n_k, std::size_t total_n,
                                           double kappa = 1.0, double decay = kDefaultStalenessDecay) {
  if (!(kappa > 0.0)) throw ConfigError("async_aggregate: kappa must be > 0");
  if (total_n == 0) throw ConfigError("async_aggregate: total sample count is zero");
  if (!global.same_shape(update)) throw ConfigError("async_aggregate: parameter shape mismatch");
  AggregationDecision d;
  d.zeta = zeta;
  d.beta = std::pow(static_cast<double>(staleness) + 1.0, -decay);
  d.psi = static_cast<double>(n_k) / static_cast<double>(total_n);
  d.lambda_raw = kappa * d.beta * d.psi * zeta;
  d.lambda = std::clamp(d.lambda_raw, 0.0, 1.0);
  d.clamped = d.lambda != d.lambda_raw;
  if (d.lambda == 1.0) {
    global = update;
  } else if (d.lambda > 0.0) {
    auto& g = global.raw();
    const auto& u = update.raw();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = (1.0 - d.lambda) * g[k] + d.lambda * u[k];
  }
  return d;
}

struct DeltaR {
  double value = 0.0;
  std::size_t absent = 0;  // classes skipped because a rate is missing
};

/// Squared class-wise rate change, summed over classes present in both vectors.
inline DeltaR delta_r(const std::vector<std::optional<double>>& before, const std::vector<std::optional<double>>& after) {
  if (before.size() != after.size()) throw ConfigError("delta_r: class count mismatch");
  DeltaR d;
  for (std::size_t c = 0; c < before.size(); ++c) {
    if (!before[c] || !after[c]) {
      ++d.absent;
      continue;
    }
    const double diff = *after[c] - *before[c];
    d.value += diff * diff;
  }
  return d;
}

struct SelectionDecision {
  std::vector<std::size_t> candidates;
  std::vector<double> delta_r;
  std::vector<std::size_t> selected;  // ascending id
  bool tie_at_cut = false;            // the P-th and (P+1)-th scores were equal
};

/// Top-P candidates by descending score; equal scores prefer the lower id.
inline SelectionDecision delta_r_select(const std::vector<std::size_t>& ids, const std::vector<double>& scores,
                                        std::size_t p_select) {
  if (ids.size() != scores.size()) throw ConfigError("delta_r_select: score list mismatch");
  if (p_select < 1) throw ConfigError("delta_r_select: P must be >= 1");
  SelectionDecision s;
  s.candidates = ids;
  s.delta_r = scores;
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  const std::size_t take = std::min(p_select, ids.size());
  for (std::size_t i = 0; i < take; ++i) s.selected.push_back(ids[order[i]]);
  if (take < ids.size()) s.tie_at_cut = scores[order[take - 1]] == scores[order[take]];
  std::sort(s.selected.begin(), s.selected.end());
  return s;
}

// ---------------------------------------------------------------------------------------------
// Rounds

enum class Aggregation { fedavg, ratew };
enum class Selection { all, delta_r };

inline std::string to_string(Aggregation a) { return a == Aggregation::fedavg ? "FedAvg" : "RateW"; }
inline std::string to_string(Selection s) { return s == Selection::all ? "All" : "DeltaR"; }

struct ProtocolConfig {
  Aggregation agg = Aggregation::fedavg;
  Selection sel = Selection::all;
  std::size_t p_select = 0;  // 0: all candidates
  double kappa = 1.0;
  double staleness_decay = kDefaultStalenessDecay;
  double sigma_min = kDefaultSigmaMin;
  bool train_unselected = true;

  std::string tag() const { return to_string(agg) + "/" + to_string(sel); }
};

struct FederationConfig {
  std::string experiment_id;
  NetworkArch arch;
  std::size_t rounds = 10;
  LocalTrainConfig local;
  ProtocolConfig protocol;
  std::uint64_t master_seed = 0;
  std::uint64_t partition_seed = 0;
  std::size_t workers = 1;
};

/// The server: owns the global model and every client, and runs synchronous rounds. By default
/// all candidates train every round (their Delta-R is needed for selection); only the selected
/// ones are aggregated, in ascending id order.
class Federation {
 public:
  Federation(FederationConfig cfg, std::vector<ClientState> clients, LabeledSpikes test, ModelParams init)
      : cfg_(std::move(cfg)), clients_(std::move(clients)), test_(std::move(test)), global_(std::move(init)) {
    if (clients_.empty()) throw ConfigError("Federation: no clients");
    if (test_.empty()) throw ConfigError("Federation: empty test set");
    for (const auto& c : clients_) total_n_ += c.n_samples();
    last_delta_r_.assign(clients_.size(), 0.0);
  }

  const ModelParams& global() const { return global_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  std::size_t round() const { return round_; }

  RoundLog run_round() {
    const std::size_t K = clients_.size();
    const auto& arch = cfg_.arch;
    RoundLog log;
    log.experiment_id = cfg_.experiment_id;
    log.round = round_;
    log.protocol = cfg_.protocol.tag();
    log.master_seed = cfg_.master_seed;
    log.partition_seed = cfg_.partition_seed;

    // Without training every candidate, selection ranks by the Delta-R each client reported the
    // last time it trained, and only the selected clients train.
    std::optional<std::vector<std::size_t>> preselected;
    if (cfg_.protocol.sel == Selection::delta_r && !cfg_.protocol.train_unselected) {
      std::vector<std::size_t> all;
      for (const auto& c : clients_) all.push_back(c.id);
      const std::size_t P = cfg_.protocol.p_select ? cfg_.protocol.p_select : K;
      preselected = delta_r_select(all, last_delta_r_, P).selected;
    }
    auto trains = [&](std::size_t k) {
      return !preselected ||
             std::find(preselected->begin(), preselected->end(), clients_[k].id) != preselected->end();
    };

    std::vector<std::vector<std::optional<double>>> before(K);
    std::vector<LocalResult> results(K);
    parallel_for(K, [&](std::size_t k) {
      const auto& c = clients_[k];
      auto ev = evaluate(global_, arch, c.val.empty() ? c.train : c.val, cfg_.local.prune_threshold);
      before[k] = ev.rates.per_class;
      if (trains(k)) {
        results[k] = local_train(c, global_, arch, cfg_.local, cfg_.master_seed, round_);
      } else {
        results[k].params = global_;
        results[k].val_eval = std::move(ev);
      }
    });

    std::vector<std::size_t> ids;
    std::vector<double> scores;
    log.clients.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      auto& c = clients_[k];
      auto& rec = log.clients[k];
      const auto& res = results[k];
      const auto dr = delta_r(before[k], res.val_eval.rates.per_class);
      rec.id = c.id;
      rec.n_samples = c.n_samples();
      rec.staleness = c.staleness;
      rec.layer_rates = res.val_eval.rates.per_layer;
      rec.network_rate = res.val_eval.rates.network;
      rec.activation_sparsity = res.val_eval.rates.activation_sparsity;
      rec.footprint_bytes = res.val_eval.rates.footprint_bytes;
      rec.class_rates = res.val_eval.rates.per_class;
      rec.delta_r = dr.value;
      rec.absent_classes = dr.absent;
      rec.clipped_fraction = res.clipped_fraction;
      rec.train_accuracy = res.train_accuracy;
      rec.val_accuracy = res.val_eval.accuracy;
      rec.local_steps = res.steps;
      rec.skipped_steps = res.skipped_steps;
      rec.aborted = res.aborted;
      rec.error = res.error;
      c.steps_taken += res.steps;
      if (c.dp.enabled) {
        rec.sigma = c.dp.sigma;
        rec.epsilon = c.steps_taken ? account_epsilon(c.dp.sigma, c.dp.sample_rate, c.steps_taken, c.dp.delta) : 0.0;
      }
      if (trains(k) && !res.aborted) last_delta_r_[k] = dr.value;
      if (!res.aborted && trains(k)) {
        ids.push_back(c.id);
        scores.push_back(dr.value);
      }
    }

    std::vector<std::size_t> selected;
    if (preselected) {
      selected = ids;
    } else if (cfg_.protocol.sel == Selection::delta_r && !ids.empty()) {
      const std::size_t P = cfg_.protocol.p_select ? cfg_.protocol.p_select : K;
      selected = delta_r_select(ids, scores, P).selected;
    } else {
      selected = ids;
    }
    log.selected = selected;
    auto index_of = [&](std::size_t id) {
      for (std::size_t k = 0; k < K; ++k)
        if (clients_[k].id == id) return k;
      throw ConfigError("unknown client id");
    };
    for (std::size_t id : selected) log.clients[index_of(id)].selected = true;

    if (!selected.empty()) {
      if (cfg_.protocol.agg == Aggregation::fedavg) {
        std::vector<const ModelParams*> ps;
        std::vector<std::size_t> ns;
        for (std::size_t id : selected) {
          ps.push_back(&results[index_of(id)].params);
          ns.push_back(clients_[index_of(id)].n_samples());
        }
        global_ = fedavg(ps, ns);
      } else {
        std::vector<double> rates;
        for (std::size_t id : selected) rates.push_back(results[index_of(id)].val_eval.rates.network);
        const auto w = rate_weight(rates, cfg_.protocol.sigma_min);
        log.mu_r = w.mu;
        log.sigma_r = w.sigma;
        for (std::size_t i = 0; i < selected.size(); ++i) {
          const std::size_t k = index_of(selected[i]);
          const auto d = async_aggregate(global_, results[k].params, w.zeta[i], clients_[k].staleness,
                                         clients_[k].n_samples(), total_n_, cfg_.protocol.kappa,
                                         cfg_.protocol.staleness_decay);
          auto& rec = log.clients[k];
          rec.zeta = d.zeta;
          rec.beta = d.beta;
          rec.psi = d.psi;
          rec.lambda_raw = d.lambda_raw;
          rec.lambda = d.lambda;
        }
      }
    }
    for (auto& c : clients_) {
      const bool applied = std::find(selected.begin(), selected.end(), c.id) != selected.end();
      c.staleness = applied ? 0 : c.staleness + 1;
    }

    const auto ev = evaluate(global_, arch, test_, cfg_.local.prune_threshold);
    log.global_test_accuracy = ev.accuracy;
    log.global_layer_rates = ev.rates.per_layer;
    ++round_;
    return log;
  }

 private:
  template <typename F>
  void parallel_for(std::size_t n, F&& f) {
    const std::size_t workers = std::max<std::size_t>(1, std::min(cfg_.workers, n));
    if (workers == 1) {
      for (std::size_t i = 0; i < n; ++i) f(i);
      return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) f(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  FederationConfig cfg_;
  std::vector<ClientState> clients_;
  LabeledSpikes test_;
  ModelParams global_;
  std::size_t total_n_ = 0;
  std::size_t round_ = 0;
  std::vector<double> last_delta_r_;
};

}  // namespace dpsnn
