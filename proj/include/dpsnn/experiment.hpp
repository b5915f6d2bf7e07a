#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpsnn/dp_engine.hpp"
#include "dpsnn/event_data.hpp"
#include "dpsnn/federated.hpp"
#include "dpsnn/metrics.hpp"
#include "dpsnn/persist.hpp"

namespace dpsnn {

using nlohmann::json;

struct DataFiles {
  std::string train, val, test;
};

struct ArchSpec {
  std::vector<std::size_t> hidden{64};
  LifConfig lif{};
  double init_gain = 2.0;
};

struct TrainSpec {
  std::size_t clients = 10;
  std::size_t rounds = 10;
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double alpha = 1.0;
  std::uint64_t partition_seed = 1;
};

/// One cell of an experiment grid.
struct ExperimentSpec {
  std::string id;
  std::string note;
  std::uint64_t seed = 1;
  std::size_t workers = 1;  // never part of the config hash
  TaskSpec task{};
  std::size_t val_per_class = 128;
  std::size_t test_per_class = 128;
  std::optional<DataFiles> data;
  ArchSpec arch;
  TrainSpec train;
  ProtocolConfig protocol;
  DpConfig dp;
  std::optional<std::string> reference;
  std::vector<std::string> metrics;  // subset of {"rmse", "lambda", "tau"}
};

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> m{"rmse", "lambda", "tau"};
  return m;
}

// ---------------------------------------------------------------------------------------------
// Parsing and validation

namespace detail {

/// Reads fields of one JSON object, recording every violation instead of stopping at the first.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string path, std::vector<std::string>& errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {
    if (!obj_.is_object()) fail("", "must be an object");
  }

  bool has(const std::string& key) const { return obj_.is_object() && obj_.contains(key) && !obj_.at(key).is_null(); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    try {
      return obj_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(key, "has the wrong type (" + std::string(obj_.at(key).type_name()) + ")");
      return fallback;
    }
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      fail(key, "must be a non-negative integer");
      return fallback;
    }
    return v.get<std::size_t>();
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return has(key) ? &obj_.at(key) : nullptr;
  }

  void require(bool ok, const std::string& key, const std::string& message) {
    if (!ok) fail(key, message);
  }

  void fail(const std::string& key, const std::string& message) {
    const std::string where = path_ + (key.empty() ? "" : (path_.empty() ? "" : ".") + key);
    errors_.push_back((where.empty() ? "" : where + ": ") + message);
  }

  /// Flags keys that no getter asked for (typos would otherwise be silently ignored).
  void finish() {
    if (!obj_.is_object()) return;
    for (const auto& [k, v] : obj_.items())
      if (!seen_.count(k)) fail(k, "unknown field");
  }

 private:
  const json& obj_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline std::optional<Aggregation> parse_aggregation(const std::string& s) {
  if (s == "FedAvg") return Aggregation::fedavg;
  if (s == "RateW") return Aggregation::ratew;
  return std::nullopt;
}

inline std::optional<Selection> parse_selection(const std::string& s) {
  if (s == "All") return Selection::all;
  if (s == "DeltaR" || s == "ΔR") return Selection::delta_r;
  return std::nullopt;
}

}  // namespace detail

struct SpecResult {
  std::optional<ExperimentSpec> spec;
  std::vector<std::string> errors;

  bool ok() const { return spec.has_value(); }
};

/// Structural and semantic validation of one experiment object. Every violation is collected.
inline SpecResult validate_spec(const json& j) {
  SpecResult res;
  auto& errs = res.errors;
  ExperimentSpec s;
  detail::FieldReader top(j, "", errs);
  if (!j.is_object()) return res;

  s.id = top.get<std::string>("id", "");
  top.require(std::regex_match(s.id, std::regex("[A-Za-z0-9_.-]+")), "id",
              "must be a non-empty name of letters, digits, '_', '-' or '.'");
  s.note = top.get<std::string>("note", "");
  s.seed = top.get<std::uint64_t>("seed", 1);
  s.workers = top.count("workers", 1);
  top.require(s.workers >= 1, "workers", "must be >= 1");

  if (const json* t = top.child("task")) {
    detail::FieldReader r(*t, "task", errs);
    s.task.n_classes = r.count("n_classes", s.task.n_classes);
    s.task.n_channels = r.count("n_channels", s.task.n_channels);
    s.task.t_steps = r.count("t_steps", 100);
    s.task.samples_per_class = r.count("samples_per_class", 640);
    s.val_per_class = r.count("val_per_class", s.val_per_class);
    s.test_per_class = r.count("test_per_class", s.test_per_class);
    s.task.base_rate = r.get<double>("base_rate", s.task.base_rate);
    s.task.signal_rate = r.get<double>("signal_rate", s.task.signal_rate);
    s.task.jitter = r.get<double>("jitter", s.task.jitter);
    s.task.seed = r.get<std::uint64_t>("seed", s.task.seed);
    r.require(s.task.n_classes >= 2, "n_classes", "must be >= 2");
    r.require(s.task.n_channels >= 1, "n_channels", "must be >= 1");
    r.require(s.task.t_steps >= 1, "t_steps", "must be >= 1");
    r.require(s.task.samples_per_class >= 1, "samples_per_class", "must be >= 1");
    r.require(s.val_per_class >= 1, "val_per_class", "must be >= 1");
    r.require(s.test_per_class >= 1, "test_per_class", "must be >= 1");
    r.require(s.task.base_rate >= 0 && s.task.base_rate <= 1, "base_rate", "must lie in [0, 1]");
    r.require(s.task.signal_rate >= 0 && s.task.signal_rate <= 1, "signal_rate", "must lie in [0, 1]");
    r.require(s.task.jitter >= 0, "jitter", "must be >= 0");
    r.finish();
  } else {
    s.task.t_steps = 100;
    s.task.samples_per_class = 640;
  }

  if (const json* d = top.child("data")) {
    detail::FieldReader r(*d, "data", errs);
    DataFiles f;
    f.train = r.get<std::string>("train", "");
    f.val = r.get<std::string>("val", "");
    f.test = r.get<std::string>("test", "");
    r.require(!f.train.empty(), "train", "spike file path required");
    r.require(!f.val.empty(), "val", "spike file path required");
    r.require(!f.test.empty(), "test", "spike file path required");
    r.finish();
    s.data = f;
  }

  if (const json* a = top.child("arch")) {
    detail::FieldReader r(*a, "arch", errs);
    s.arch.hidden = r.get<std::vector<std::size_t>>("hidden", s.arch.hidden);
    for (auto h : s.arch.hidden) r.require(h >= 1, "hidden", "layer widths must be >= 1");
    s.arch.lif.v_th = r.get<double>("v_th", s.arch.lif.v_th);
    s.arch.lif.beta_init = r.get<double>("beta", s.arch.lif.beta_init);
    s.arch.lif.beta_learnable = r.get<bool>("learn_beta", s.arch.lif.beta_learnable);
    s.arch.lif.surrogate_slope = r.get<double>("surrogate_slope", s.arch.lif.surrogate_slope);
    s.arch.lif.tau_ref_steps = r.get<int>("refractory_steps", 0);
    const auto reset = r.get<std::string>("reset", "subtractive");
    if (reset == "subtractive")
      s.arch.lif.reset = ResetMode::subtractive;
    else if (reset == "hard")
      s.arch.lif.reset = ResetMode::hard;
    else
      r.fail("reset", "must be \"subtractive\" or \"hard\"");
    s.arch.init_gain = r.get<double>("init_gain", s.arch.init_gain);
    r.require(s.arch.lif.v_th > s.arch.lif.v_rest, "v_th", "must be > 0");
    r.require(s.arch.lif.beta_init > 0 && s.arch.lif.beta_init < 1, "beta", "must lie in (0, 1)");
    r.require(s.arch.lif.surrogate_slope > 0, "surrogate_slope", "must be > 0");
    r.require(s.arch.lif.tau_ref_steps >= 0, "refractory_steps", "must be >= 0");
    r.require(s.arch.init_gain > 0, "init_gain", "must be > 0");
    r.finish();
  }

  if (const json* t = top.child("train")) {
    detail::FieldReader r(*t, "train", errs);
    s.train.clients = r.count("clients", s.train.clients);
    s.train.rounds = r.count("rounds", s.train.rounds);
    s.train.epochs = r.count("epochs", s.train.epochs);
    s.train.batch_size = r.count("batch_size", s.train.batch_size);
    s.train.lr = r.get<double>("lr", s.train.lr);
    s.train.alpha = r.get<double>("alpha", s.train.alpha);
    s.train.partition_seed = r.get<std::uint64_t>("partition_seed", s.train.partition_seed);
    r.require(s.train.clients >= 1, "clients", "K must be >= 1");
    r.require(s.train.rounds >= 1, "rounds", "R must be >= 1");
    r.require(s.train.epochs >= 1, "epochs", "E must be >= 1");
    r.require(s.train.batch_size >= 1, "batch_size", "B must be >= 1");
    r.require(s.train.lr > 0, "lr", "learning rate must be > 0");
    r.require(s.train.alpha > 0, "alpha", "Dirichlet concentration must be > 0");
    r.finish();
  }

  if (const json* p = top.child("protocol")) {
    detail::FieldReader r(*p, "protocol", errs);
    const auto agg = detail::parse_aggregation(r.get<std::string>("agg", "FedAvg"));
    const auto sel = detail::parse_selection(r.get<std::string>("sel", "All"));
    if (agg) s.protocol.agg = *agg; else r.fail("agg", "must be \"FedAvg\" or \"RateW\"");
    if (sel) s.protocol.sel = *sel; else r.fail("sel", "must be \"All\" or \"DeltaR\"");
    s.protocol.p_select = r.count("select", s.train.clients);
    s.protocol.kappa = r.get<double>("kappa", s.protocol.kappa);
    s.protocol.staleness_decay = r.get<double>("staleness_decay", s.protocol.staleness_decay);
    s.protocol.sigma_min = r.get<double>("sigma_min", s.protocol.sigma_min);
    s.protocol.train_unselected = r.get<bool>("train_unselected", s.protocol.train_unselected);
    r.require(s.protocol.p_select >= 1 && s.protocol.p_select <= s.train.clients, "select",
              "P must lie in [1, K] (K = " + std::to_string(s.train.clients) + ")");
    r.require(s.protocol.sel != Selection::all || s.protocol.p_select == s.train.clients, "select",
              "selection \"All\" requires P = K");
    r.require(s.protocol.kappa > 0, "kappa", "must be > 0");
    r.require(s.protocol.staleness_decay >= 0, "staleness_decay", "must be >= 0");
    r.require(s.protocol.sigma_min > 0, "sigma_min", "must be > 0");
    r.finish();
  } else {
    s.protocol.p_select = s.train.clients;
  }

  if (const json* d = top.child("dp")) {
    detail::FieldReader r(*d, "dp", errs);
    s.dp.enabled = r.get<bool>("enabled", true);
    s.dp.epsilon = r.get<double>("epsilon", s.dp.epsilon);
    s.dp.clip_c = r.get<double>("clip", s.dp.clip_c);
    const auto mode = r.get<std::string>("clip_mode", "global");
    if (mode == "global")
      s.dp.clip_mode = ClipMode::global;
    else if (mode == "per_layer")
      s.dp.clip_mode = ClipMode::per_layer;
    else
      r.fail("clip_mode", "must be \"global\" or \"per_layer\"");
    if (r.has("sigma")) {
      s.dp.sigma = r.get<double>("sigma", 1.0);
      s.dp.sigma_override = true;
      r.require(s.dp.sigma >= 0, "sigma", "noise multiplier must be >= 0");
    } else {
      r.get<double>("sigma", 0.0);
    }
    if (s.dp.enabled) {
      r.require(s.dp.epsilon > 0, "epsilon", "privacy budget must be > 0");
      r.require(s.dp.clip_c > 0, "clip", "clip bound C must be > 0");
    }
    r.finish();
  }

  if (top.has("reference")) s.reference = top.get<std::string>("reference", "");
  s.metrics = top.get<std::vector<std::string>>("metrics", {});
  for (const auto& m : s.metrics)
    if (std::find(known_metrics().begin(), known_metrics().end(), m) == known_metrics().end())
      top.fail("metrics", "unknown metric \"" + m + "\" (expected rmse, lambda or tau)");
  if (!s.metrics.empty() && (!s.reference || s.reference->empty()))
    top.fail("reference", "paired metrics requested but no reference id given");
  if (s.reference && *s.reference == s.id) top.fail("reference", "an experiment cannot be its own reference");
  if (std::find(s.metrics.begin(), s.metrics.end(), "lambda") != s.metrics.end() &&
      s.protocol.agg != Aggregation::ratew)
    top.fail("metrics", "lambda deviation requires the RateW protocol");
  top.finish();

  if (errs.empty()) res.spec = std::move(s);
  return res;
}

inline SpecResult validate_spec(const std::string& text) {
  try {
    return validate_spec(json::parse(text));
  } catch (const json::parse_error& e) {
    return {std::nullopt, {std::string("not valid JSON: ") + e.what()}};
  }
}

/// Canonical JSON of a validated spec (all defaults filled in). Used for the config hash, so
/// `workers` is deliberately absent.
inline json spec_to_json(const ExperimentSpec& s) {
  json j;
  j["id"] = s.id;
  j["note"] = s.note;
  j["seed"] = s.seed;
  if (s.data) {
    j["data"] = {{"train", s.data->train}, {"val", s.data->val}, {"test", s.data->test}};
  } else {
    j["task"] = {{"n_classes", s.task.n_classes},     {"n_channels", s.task.n_channels},
                 {"t_steps", s.task.t_steps},         {"samples_per_class", s.task.samples_per_class},
                 {"val_per_class", s.val_per_class},  {"test_per_class", s.test_per_class},
                 {"base_rate", s.task.base_rate},     {"signal_rate", s.task.signal_rate},
                 {"jitter", s.task.jitter},           {"seed", s.task.seed}};
  }
  j["arch"] = {{"hidden", s.arch.hidden},
               {"v_th", s.arch.lif.v_th},
               {"beta", s.arch.lif.beta_init},
               {"learn_beta", s.arch.lif.beta_learnable},
               {"surrogate_slope", s.arch.lif.surrogate_slope},
               {"refractory_steps", s.arch.lif.tau_ref_steps},
               {"reset", s.arch.lif.reset == ResetMode::subtractive ? "subtractive" : "hard"},
               {"init_gain", s.arch.init_gain}};
  j["train"] = {{"clients", s.train.clients}, {"rounds", s.train.rounds}, {"epochs", s.train.epochs},
                {"batch_size", s.train.batch_size}, {"lr", s.train.lr}, {"alpha", s.train.alpha},
                {"partition_seed", s.train.partition_seed}};
  j["protocol"] = {{"agg", to_string(s.protocol.agg)},
                   {"sel", to_string(s.protocol.sel)},
                   {"select", s.protocol.p_select},
                   {"kappa", s.protocol.kappa},
                   {"staleness_decay", s.protocol.staleness_decay},
                   {"sigma_min", s.protocol.sigma_min},
                   {"train_unselected", s.protocol.train_unselected}};
  if (s.dp.enabled) {
    j["dp"] = {{"enabled", true},
               {"epsilon", s.dp.epsilon},
               {"clip", s.dp.clip_c},
               {"clip_mode", s.dp.clip_mode == ClipMode::global ? "global" : "per_layer"}};
    if (s.dp.sigma_override) j["dp"]["sigma"] = s.dp.sigma;
  }
  if (s.reference) j["reference"] = *s.reference;
  if (!s.metrics.empty()) j["metrics"] = s.metrics;
  return j;
}

// ---------------------------------------------------------------------------------------------
// Grids

/// A grid file: shared `defaults`, a list of `cells` (each merged over the defaults), and an
/// optional `seeds` list that replicates every cell per master seed.
struct Grid {
  std::string name;
  std::vector<ExperimentSpec> specs;  // cell-major, then seed
};

struct GridResult {
  std::optional<Grid> grid;
  std::vector<std::string> errors;
};

inline GridResult expand_grid(const json& j) {
  GridResult res;
  auto& errs = res.errors;
  detail::FieldReader top(j, "", errs);
  if (!j.is_object()) return res;
  Grid g;
  g.name = top.get<std::string>("name", "grid");
  const json* defaults = top.child("defaults");
  const json* cells = top.child("cells");
  const auto seeds = top.get<std::vector<std::uint64_t>>("seeds", {});
  top.finish();
  if (!cells || !cells->is_array() || cells->empty()) {
    errs.push_back("cells: must be a non-empty array");
    return res;
  }
  std::vector<std::vector<ExperimentSpec>> by_cell;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < cells->size(); ++i) {
    json merged = defaults ? *defaults : json::object();
    merged.merge_patch((*cells)[i]);
    std::vector<std::uint64_t> cell_seeds = seeds;
    if (cell_seeds.empty()) cell_seeds.push_back(merged.value("seed", std::uint64_t{1}));
    std::vector<ExperimentSpec> specs;
    for (auto seed : cell_seeds) {
      merged["seed"] = seed;
      auto r = validate_spec(merged);
      const std::string label = "cells[" + std::to_string(i) + "]" +
                                ((*cells)[i].contains("id") ? " (" + (*cells)[i]["id"].dump() + ")" : "");
      for (const auto& e : r.errors) errs.push_back(label + " " + e);
      if (!r.spec) break;
      specs.push_back(std::move(*r.spec));
    }
    if (!specs.empty() && !ids.insert(specs.front().id).second)
      errs.push_back("cells[" + std::to_string(i) + "]: duplicate id \"" + specs.front().id + "\"");
    by_cell.push_back(std::move(specs));
  }
  if (!errs.empty()) return res;

  std::map<std::string, const ExperimentSpec*> first_by_id;
  for (const auto& cs : by_cell) first_by_id[cs.front().id] = &cs.front();
  for (const auto& cs : by_cell) {
    const auto& s = cs.front();
    if (!s.reference) continue;
    const auto it = first_by_id.find(*s.reference);
    if (it == first_by_id.end()) {
      errs.push_back(s.id + ": reference \"" + *s.reference + "\" is not a cell of this grid");
      continue;
    }
    const auto& r = *it->second;
    if (r.dp.enabled) errs.push_back(s.id + ": reference \"" + r.id + "\" must have DP disabled");
    if (r.reference) errs.push_back(s.id + ": reference \"" + r.id + "\" must not itself need a reference");
    if (r.train.clients != s.train.clients || r.train.rounds != s.train.rounds ||
        r.train.partition_seed != s.train.partition_seed)
      errs.push_back(s.id + ": reference \"" + r.id + "\" differs in K, R or partition seed");
    if (r.protocol.tag() != s.protocol.tag() || r.protocol.p_select != s.protocol.p_select)
      errs.push_back(s.id + ": reference \"" + r.id + "\" uses a different protocol (" + r.protocol.tag() + ")");
  }
  if (!errs.empty()) return res;
  for (auto& cs : by_cell)
    for (auto& s : cs) g.specs.push_back(std::move(s));
  res.grid = std::move(g);
  return res;
}

// ---------------------------------------------------------------------------------------------
// Running

struct ExperimentData {
  LabeledSpikes train, val, test;
};

inline ExperimentData load_data(const ExperimentSpec& s) {
  ExperimentData d;
  if (s.data) {
    d.train = load_spike_file(s.data->train);
    d.val = load_spike_file(s.data->val);
    d.test = load_spike_file(s.data->test);
    if (d.val.channels() != d.train.channels() || d.test.channels() != d.train.channels() ||
        d.val.steps() != d.train.steps() || d.test.steps() != d.train.steps() ||
        d.val.n_classes != d.train.n_classes || d.test.n_classes != d.train.n_classes)
      throw ConfigError("data: train/val/test spike files disagree on steps, channels or classes");
    return d;
  }
  TaskSpec t = s.task;
  auto r_train = make_stream(t.seed, Stream::data, 0);
  auto r_val = make_stream(t.seed, Stream::data, 1);
  auto r_test = make_stream(t.seed, Stream::data, 2);
  d.train = generate(t, r_train);
  t.samples_per_class = s.val_per_class;
  d.val = generate(t, r_val);
  t.samples_per_class = s.test_per_class;
  d.test = generate(t, r_test);
  return d;
}

inline NetworkArch make_arch(const ExperimentSpec& s, std::size_t channels, std::size_t steps, std::size_t classes) {
  std::vector<std::size_t> sizes{channels};
  for (auto h : s.arch.hidden) sizes.push_back(h);
  sizes.push_back(classes);
  return NetworkArch::dense(sizes, steps, s.arch.lif);
}

/// Per-client class counts of a partition (train and validation).
inline json partition_histograms(const ExperimentData& d, const Partition& p) {
  json out = json::array();
  for (std::size_t k = 0; k < p.train.size(); ++k) {
    std::vector<std::size_t> tr(d.train.n_classes, 0), va(d.train.n_classes, 0);
    for (auto i : p.train[k]) ++tr[static_cast<std::size_t>(d.train.labels[i])];
    for (auto i : p.val[k]) ++va[static_cast<std::size_t>(d.val.labels[i])];
    out.push_back({{"client", k}, {"train", tr}, {"val", va}});
  }
  return out;
}

struct PreparedExperiment {
  NetworkArch arch;
  Partition partition;
  json histograms;
  std::vector<ClientState> clients;
  LabeledSpikes test;
  ModelParams init;
  FederationConfig config;
};

inline PreparedExperiment prepare_experiment(const ExperimentSpec& s, std::size_t workers) {
  PreparedExperiment p;
  auto data = load_data(s);
  p.arch = make_arch(s, data.train.channels(), data.train.steps(), data.train.n_classes);
  auto prng = make_stream(s.train.partition_seed, Stream::partition);
  p.partition = dirichlet_partition(data.train, &data.val, s.train.clients, s.train.alpha, prng);
  p.histograms = partition_histograms(data, p.partition);
  for (std::size_t k = 0; k < s.train.clients; ++k) {
    ClientState c;
    c.id = k;
    c.train = data.train.subset(p.partition.train[k]);
    c.val = data.val.subset(p.partition.val[k]);
    try {
      c.dp = configure_client_dp(s.dp, c.n_samples(), s.train.batch_size, s.train.epochs, s.train.rounds);
    } catch (const ConfigError& e) {
      throw ConfigError("client " + std::to_string(k) + " (N_k = " + std::to_string(c.n_samples()) +
                        "): sigma calibration failed: " + e.what());
    }
    p.clients.push_back(std::move(c));
  }
  p.test = std::move(data.test);
  auto irng = make_stream(s.seed, Stream::init);
  p.init = ModelParams::random(p.arch, irng, s.arch.init_gain);
  auto& f = p.config;
  f.experiment_id = s.id;
  f.arch = p.arch;
  f.rounds = s.train.rounds;
  f.local.epochs = s.train.epochs;
  f.local.batch_size = s.train.batch_size;
  f.local.adam.lr = s.train.lr;
  f.protocol = s.protocol;
  f.master_seed = s.seed;
  f.partition_seed = s.train.partition_seed;
  f.workers = workers;
  return p;
}

/// Runs every round in memory.
inline std::vector<RoundLog> simulate_experiment(const ExperimentSpec& s, std::size_t workers,
                                                 std::ostream* progress = nullptr, json* histograms = nullptr) {
  auto p = prepare_experiment(s, workers);
  if (histograms) *histograms = p.histograms;
  Federation fed(p.config, std::move(p.clients), std::move(p.test), std::move(p.init));
  std::vector<RoundLog> logs;
  for (std::size_t r = 0; r < s.train.rounds; ++r) {
    logs.push_back(fed.run_round());
    if (progress)
      *progress << s.id << " round " << r + 1 << "/" << s.train.rounds << " test accuracy "
                << logs.back().global_test_accuracy << "\n";
  }
  return logs;
}

// ---------------------------------------------------------------------------------------------
// Summaries

/// Mean over rounds and clients of the hidden-layer rates (all layers but the output).
inline double mean_hidden_rate(const std::vector<RoundLog>& logs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& log : logs)
    for (const auto& c : log.clients) {
      if (c.aborted || c.layer_rates.size() < 2) continue;
      for (std::size_t l = 0; l + 1 < c.layer_rates.size(); ++l, ++n) sum += c.layer_rates[l];
    }
  return n ? sum / static_cast<double>(n) : std::nan("");
}

/// Mean over rounds of the population std of client network rates.
inline double rate_dispersion(const std::vector<RoundLog>& logs) {
  std::vector<double> per_round;
  for (const auto& log : logs) {
    std::vector<double> r;
    for (const auto& c : log.clients)
      if (!c.aborted) r.push_back(c.network_rate);
    if (r.empty()) continue;
    double mu = 0.0, ss = 0.0;
    for (double v : r) mu += v;
    mu /= static_cast<double>(r.size());
    for (double v : r) ss += (v - mu) * (v - mu);
    per_round.push_back(std::sqrt(ss / static_cast<double>(r.size())));
  }
  if (per_round.empty()) return std::nan("");
  double s = 0.0;
  for (double v : per_round) s += v;
  return s / static_cast<double>(per_round.size());
}

inline const std::vector<std::string>& summary_header() {
  static const std::vector<std::string> h{
      "id",           "seed",          "epsilon",       "C",           "agg",          "sel",
      "N_P",          "reference",     "rounds",        "final_test_accuracy",        "realized_epsilon_max",
      "sigma_mean",   "mean_network_rate", "mean_hidden_rate", "rate_dispersion",
      "rmse_r",       "rmse_r_ci95",   "rmse_rl",       "rmse_rl_ci95", "rmse_as",     "rmse_as_ci95",
      "rmse_fp",      "rmse_fp_ci95",  "dlambda_mean",  "dlambda_sum",  "dlambda_percent", "dlambda_ci95",
      "tau",          "tau_ci95",      "aborted_updates", "note"};
  return h;
}

/// One Table-1 shaped row. Paired columns stay empty without a reference run.
inline std::vector<std::string> summary_row(const ExperimentSpec& s, const std::vector<RoundLog>& logs,
                                            const std::vector<RoundLog>* reference) {
  auto num = [](double v) { return csv_number(v); };
  const auto nan = std::nan("");
  double eps_max = nan, sigma_sum = 0.0, rate_sum = 0.0;
  std::size_t sigma_n = 0, rate_n = 0, aborted = 0;
  for (const auto& log : logs)
    for (const auto& c : log.clients) {
      if (c.epsilon) eps_max = std::isnan(eps_max) ? *c.epsilon : std::max(eps_max, *c.epsilon);
      if (c.sigma) {
        sigma_sum += *c.sigma;
        ++sigma_n;
      }
      if (c.aborted) {
        ++aborted;
        continue;
      }
      rate_sum += c.network_rate;
      ++rate_n;
    }
  std::vector<std::string> row{s.id,
                               std::to_string(s.seed),
                               s.dp.enabled ? num(s.dp.epsilon) : "inf",
                               s.dp.enabled ? num(s.dp.clip_c) : "",
                               to_string(s.protocol.agg),
                               to_string(s.protocol.sel),
                               std::to_string(s.train.clients) + "/" + std::to_string(s.protocol.p_select),
                               s.reference.value_or(""),
                               std::to_string(logs.size()),
                               logs.empty() ? "" : num(logs.back().global_test_accuracy),
                               num(eps_max),
                               sigma_n ? num(sigma_sum / static_cast<double>(sigma_n)) : "",
                               rate_n ? num(rate_sum / static_cast<double>(rate_n)) : "",
                               num(mean_hidden_rate(logs)),
                               num(rate_dispersion(logs))};
  auto wants = [&](const std::string& m) { return std::find(s.metrics.begin(), s.metrics.end(), m) != s.metrics.end(); };
  for (auto m : {RateMetric::network_rate, RateMetric::layer_rates, RateMetric::activation_sparsity,
                 RateMetric::footprint}) {
    if (reference && wants("rmse")) {
      const auto r = rmse_metric(logs, *reference, m);
      row.push_back(num(r.value));
      row.push_back(num(r.per_round.half_width));
    } else {
      row.insert(row.end(), {"", ""});
    }
  }
  if (reference && wants("lambda")) {
    const auto d = lambda_deviation(logs, *reference);
    row.insert(row.end(), {num(d.mean), d.events ? num(d.sum) : "", num(d.percent),
                           d.events ? num(d.per_round.half_width) : ""});
  } else {
    row.insert(row.end(), {"", "", "", ""});
  }
  if (reference && wants("tau")) {
    const auto t = ranking_stability(logs, *reference);
    row.insert(row.end(), {num(t.tau.mean), num(t.tau.half_width)});
  } else {
    row.insert(row.end(), {"", ""});
  }
  row.push_back(std::to_string(aborted));
  row.push_back(s.note);
  return row;
}

struct RunOptions {
  std::filesystem::path sink = "runs";
  bool force = false;
  std::optional<std::size_t> workers;
  std::ostream* progress = nullptr;
};

struct RunResult {
  std::filesystem::path dir;
  std::vector<RoundLog> logs;
  std::vector<std::string> summary;
};

/// partition -> calibrate -> R rounds -> metrics; persists rounds.jsonl, manifest.json and a
/// one-row summary.csv in `<sink>/<id>_<hash>/`.
inline RunResult run_experiment(const ExperimentSpec& s, const RunOptions& opt,
                                const std::vector<RoundLog>* reference = nullptr) {
  if (!s.metrics.empty() && !reference)
    throw ConfigError(s.id + ": paired metrics need the reference run \"" + s.reference.value_or("") + "\"");
  const auto cfg = spec_to_json(s);
  const json seeds = {{"master", s.seed}, {"partition", s.train.partition_seed},
                      {"task", s.data ? json(nullptr) : json(s.task.seed)}};
  auto p = prepare_experiment(s, opt.workers.value_or(s.workers));
  RunWriter writer(opt.sink, s.id, cfg, seeds, opt.force,
                   {{"partition", p.histograms}, {"epsilon", s.dp.enabled ? json(s.dp.epsilon) : json("inf")}});
  Federation fed(p.config, std::move(p.clients), std::move(p.test), std::move(p.init));
  RunResult res;
  res.dir = writer.dir();
  for (std::size_t r = 0; r < s.train.rounds; ++r) {
    res.logs.push_back(fed.run_round());
    writer.append(res.logs.back());
    if (opt.progress)
      *opt.progress << s.id << " round " << r + 1 << "/" << s.train.rounds << " test accuracy "
                    << res.logs.back().global_test_accuracy << std::endl;
  }
  res.summary = summary_row(s, res.logs, reference);
  write_text(res.dir / kSummaryFile, csv_table(summary_header(), {res.summary}));
  return res;
}

/// Runs every cell (references first within each seed) and writes `<sink>/<name>_summary.csv`
/// in grid order.
inline std::vector<RunResult> run_grid(const Grid& g, const RunOptions& opt) {
  std::map<std::pair<std::string, std::uint64_t>, std::size_t> index;
  for (std::size_t i = 0; i < g.specs.size(); ++i) index[{g.specs[i].id, g.specs[i].seed}] = i;
  std::vector<std::optional<RunResult>> results(g.specs.size());
  std::function<const RunResult&(std::size_t)> run = [&](std::size_t i) -> const RunResult& {
    if (!results[i]) {
      const auto& s = g.specs[i];
      const std::vector<RoundLog>* ref = nullptr;
      if (s.reference) ref = &run(index.at({*s.reference, s.seed})).logs;
      results[i] = run_experiment(s, opt, s.metrics.empty() ? nullptr : ref);
    }
    return *results[i];
  };
  std::vector<std::vector<std::string>> rows;
  std::vector<RunResult> out;
  for (std::size_t i = 0; i < g.specs.size(); ++i) {
    rows.push_back(run(i).summary);
  }
  for (auto& r : results) out.push_back(std::move(*r));
  std::filesystem::create_directories(opt.sink);
  write_text(opt.sink / (g.name + "_summary.csv"), csv_table(summary_header(), rows));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Plot data

enum class PlotKind { layer_rates_by_eps, client_histograms };

/// layer_rates_by_eps: run, epsilon, client, layer, mean rate across rounds.
/// client_histograms: run, client, class, train and validation sample counts.
inline std::string emit_plot_data(const std::vector<std::filesystem::path>& run_dirs, PlotKind kind) {
  if (run_dirs.empty()) throw ConfigError("plot-data: no run directories given");
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header;
  if (kind == PlotKind::layer_rates_by_eps)
    header = {"run", "epsilon", "client", "layer", "mean_rate"};
  else
    header = {"run", "client", "class", "train_count", "val_count"};
  for (const auto& dir : run_dirs) {
    if (!std::filesystem::exists(dir / kManifestFile)) throw IoError("missing run: no manifest in " + dir.string());
    const auto manifest = read_manifest(dir);
    const std::string id = manifest.at("experiment_id").get<std::string>();
    if (kind == PlotKind::client_histograms) {
      for (const auto& c : manifest.at("partition")) {
        const auto tr = c.at("train").get<std::vector<std::size_t>>();
        const auto va = c.at("val").get<std::vector<std::size_t>>();
        for (std::size_t k = 0; k < tr.size(); ++k)
          rows.push_back({id, std::to_string(c.at("client").get<std::size_t>()), std::to_string(k),
                          std::to_string(tr[k]), std::to_string(va[k])});
      }
      continue;
    }
    const auto& e = manifest.at("epsilon");
    const std::string eps = e.is_string() ? e.get<std::string>() : csv_number(e.get<double>());
    const auto logs = read_round_logs(dir / kRoundsFile);
    std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> acc;
    for (const auto& log : logs)
      for (const auto& c : log.clients) {
        if (c.aborted) continue;
        for (std::size_t l = 0; l < c.layer_rates.size(); ++l) {
          auto& a = acc[{c.id, l}];
          a.first += c.layer_rates[l];
          ++a.second;
        }
      }
    for (const auto& [key, v] : acc)
      rows.push_back({id, eps, std::to_string(key.first), std::to_string(key.second + 1),
                      csv_number(v.first / static_cast<double>(v.second))});
  }
  return csv_table(header, rows);
}

}  // namespace dpsnn
