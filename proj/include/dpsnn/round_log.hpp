#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace dpsnn {

inline constexpr int kRoundLogSchema = 1;

/// Everything recorded about one candidate client in one round.
struct ClientRecord {
  std::size_t id = 0;
  bool selected = false;
  std::size_t n_samples = 0;
  std::size_t staleness = 0;  // rounds since last absorbed, before this round's aggregation
  std::vector<double> layer_rates;
  double network_rate = 0.0;
  double activation_sparsity = 0.0;
  std::uint64_t footprint_bytes = 0;
  std::vector<std::optional<double>> class_rates;
  double delta_r = 0.0;
  std::size_t absent_classes = 0;
  std::optional<double> zeta, beta, psi, lambda_raw, lambda;
  std::optional<double> sigma, epsilon;
  double clipped_fraction = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::size_t local_steps = 0;
  std::size_t skipped_steps = 0;
  bool aborted = false;
  std::string error;

  friend bool operator==(const ClientRecord&, const ClientRecord&) = default;
};

struct RoundLog {
  int schema = kRoundLogSchema;
  std::string experiment_id;
  std::size_t round = 0;
  std::string protocol;  // "<agg>/<sel>"
  std::uint64_t master_seed = 0;
  std::uint64_t partition_seed = 0;
  std::optional<double> mu_r, sigma_r;
  double global_test_accuracy = 0.0;
  std::vector<double> global_layer_rates;
  std::vector<std::size_t> selected;  // ids in application order
  std::vector<ClientRecord> clients;

  const ClientRecord* client(std::size_t id) const {
    for (const auto& c : clients)
      if (c.id == id) return &c;
    return nullptr;
  }

  friend bool operator==(const RoundLog&, const RoundLog&) = default;
};

namespace detail {

template <typename T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <typename T>
std::optional<T> json_opt(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<T>();
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ClientRecord& c) {
  nlohmann::json cr = nlohmann::json::array();
  for (const auto& v : c.class_rates) cr.push_back(detail::opt_json(v));
  j = {{"id", c.id},
       {"selected", c.selected},
       {"n_samples", c.n_samples},
       {"staleness", c.staleness},
       {"layer_rates", c.layer_rates},
       {"network_rate", c.network_rate},
       {"activation_sparsity", c.activation_sparsity},
       {"footprint_bytes", c.footprint_bytes},
       {"class_rates", cr},
       {"delta_r", c.delta_r},
       {"absent_classes", c.absent_classes},
       {"zeta", detail::opt_json(c.zeta)},
       {"beta", detail::opt_json(c.beta)},
       {"psi", detail::opt_json(c.psi)},
       {"lambda_raw", detail::opt_json(c.lambda_raw)},
       {"lambda", detail::opt_json(c.lambda)},
       {"sigma", detail::opt_json(c.sigma)},
       {"epsilon", detail::opt_json(c.epsilon)},
       {"clipped_fraction", c.clipped_fraction},
       {"train_accuracy", c.train_accuracy},
       {"val_accuracy", c.val_accuracy},
       {"local_steps", c.local_steps},
       {"skipped_steps", c.skipped_steps},
       {"aborted", c.aborted},
       {"error", c.error}};
}

inline void from_json(const nlohmann::json& j, ClientRecord& c) {
  c.id = j.at("id").get<std::size_t>();
  c.selected = j.at("selected").get<bool>();
  c.n_samples = j.at("n_samples").get<std::size_t>();
  c.staleness = j.at("staleness").get<std::size_t>();
  c.layer_rates = j.at("layer_rates").get<std::vector<double>>();
  c.network_rate = j.at("network_rate").get<double>();
  c.activation_sparsity = j.at("activation_sparsity").get<double>();
  c.footprint_bytes = j.at("footprint_bytes").get<std::uint64_t>();
  c.class_rates.clear();
  for (const auto& v : j.at("class_rates")) c.class_rates.push_back(detail::json_opt<double>(v));
  c.delta_r = j.at("delta_r").get<double>();
  c.absent_classes = j.at("absent_classes").get<std::size_t>();
  c.zeta = detail::json_opt<double>(j.at("zeta"));
  c.beta = detail::json_opt<double>(j.at("beta"));
  c.psi = detail::json_opt<double>(j.at("psi"));
  c.lambda_raw = detail::json_opt<double>(j.at("lambda_raw"));
  c.lambda = detail::json_opt<double>(j.at("lambda"));
  c.sigma = detail::json_opt<double>(j.at("sigma"));
  c.epsilon = detail::json_opt<double>(j.at("epsilon"));
  c.clipped_fraction = j.at("clipped_fraction").get<double>();
  c.train_accuracy = j.at("train_accuracy").get<double>();
  c.val_accuracy = j.at("val_accuracy").get<double>();
  c.local_steps = j.at("local_steps").get<std::size_t>();
  c.skipped_steps = j.at("skipped_steps").get<std::size_t>();
  c.aborted = j.at("aborted").get<bool>();
  c.error = j.at("error").get<std::string>();
}

inline void to_json(nlohmann::json& j, const RoundLog& r) {
  j = {{"schema", r.schema},
       {"experiment_id", r.experiment_id},
       {"round", r.round},
       {"protocol", r.protocol},
       {"master_seed", r.master_seed},
       {"partition_seed", r.partition_seed},
       {"mu_r", detail::opt_json(r.mu_r)},
       {"sigma_r", detail::opt_json(r.sigma_r)},
       {"global_test_accuracy", r.global_test_accuracy},
       {"global_layer_rates", r.global_layer_rates},
       {"selected", r.selected},
       {"clients", r.clients}};
}

inline void from_json(const nlohmann::json& j, RoundLog& r) {
  r.schema = j.at("schema").get<int>();
  r.experiment_id = j.at("experiment_id").get<std::string>();
  r.round = j.at("round").get<std::size_t>();
  r.protocol = j.at("protocol").get<std::string>();
  r.master_seed = j.at("master_seed").get<std::uint64_t>();
  r.partition_seed = j.at("partition_seed").get<std::uint64_t>();
  r.mu_r = detail::json_opt<double>(j.at("mu_r"));
  r.sigma_r = detail::json_opt<double>(j.at("sigma_r"));
  r.global_test_accuracy = j.at("global_test_accuracy").get<double>();
  r.global_layer_rates = j.at("global_layer_rates").get<std::vector<double>>();
  r.selected = j.at("selected").get<std::vector<std::size_t>>();
  r.clients = j.at("clients").get<std::vector<ClientRecord>>();
}

}  // namespace dpsnn
