#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "dpsnn/experiment.hpp"

using namespace dpsnn;
namespace fs = std::filesystem;

namespace {

fs::path config(const std::string& name) { return fs::path(DPSNN_CONFIG_DIR) / name; }

json tiny_spec() {
  return {{"id", "tiny"},
          {"seed", 3},
          {"task", {{"n_classes", 3}, {"n_channels", 12}, {"t_steps", 20}, {"samples_per_class", 60},
                    {"val_per_class", 20}, {"test_per_class", 20}}},
          {"arch", {{"hidden", {10}}}},
          {"train", {{"clients", 4}, {"rounds", 2}, {"batch_size", 16}, {"lr", 0.01}}},
          {"protocol", {{"agg", "RateW"}, {"sel", "DeltaR"}, {"select", 2}}},
          {"dp", {{"epsilon", 4.0}, {"clip", 1.0}}}};
}

ExperimentSpec parse(const json& j) {
  auto r = validate_spec(j);
  if (!r.spec) throw ConfigError(r.errors.empty() ? "invalid" : r.errors.front());
  return *r.spec;
}

bool mentions(const std::vector<std::string>& errors, const std::string& needle) {
  return std::any_of(errors.begin(), errors.end(), [&](const auto& e) { return e.find(needle) != std::string::npos; });
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(ValidateSpec, AcceptsShippedConfigs) {
  for (const auto& e : fs::directory_iterator(DPSNN_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    const auto j = json::parse(read_text(e.path()));
    if (j.contains("cells")) {
      const auto g = expand_grid(j);
      EXPECT_TRUE(g.grid.has_value()) << e.path() << ": " << (g.errors.empty() ? "" : g.errors.front());
    } else {
      const auto r = validate_spec(j);
      EXPECT_TRUE(r.ok()) << e.path() << ": " << (r.errors.empty() ? "" : r.errors.front());
    }
  }
}

TEST(ValidateSpec, Examples) {
  auto j = tiny_spec();
  j["train"]["clients"] = 0;
  EXPECT_TRUE(mentions(validate_spec(j).errors, "K must be >= 1"));

  j = tiny_spec();
  j["dp"]["clip"] = 0.0;
  EXPECT_TRUE(mentions(validate_spec(j).errors, "clip bound C must be > 0"));

  j = tiny_spec();
  j["metrics"] = {"lambda"};
  EXPECT_TRUE(mentions(validate_spec(j).errors, "no reference id"));
}

TEST(ValidateSpec, RejectsEveryMutation) {
  struct Mutation {
    std::string pointer;
    json value;
    std::string expect;
  };
  const std::vector<Mutation> mutations{
      {"/id", "", "id"},
      {"/id", "has space", "id"},
      {"/workers", 0, "workers"},
      {"/task/n_classes", 1, "n_classes"},
      {"/task/t_steps", 0, "t_steps"},
      {"/task/samples_per_class", -3, "samples_per_class"},
      {"/task/base_rate", 1.5, "base_rate"},
      {"/task/jitter", -0.1, "jitter"},
      {"/arch/hidden", {0}, "hidden"},
      {"/arch/beta", 1.0, "beta"},
      {"/arch/v_th", 0.0, "v_th"},
      {"/arch/reset", "soft", "reset"},
      {"/arch/init_gain", 0.0, "init_gain"},
      {"/train/rounds", 0, "R must be"},
      {"/train/epochs", 0, "E must be"},
      {"/train/batch_size", 0, "B must be"},
      {"/train/lr", 0.0, "learning rate"},
      {"/train/alpha", -1.0, "Dirichlet"},
      {"/protocol/agg", "Median", "agg"},
      {"/protocol/sel", "Random", "sel"},
      {"/protocol/select", 9, "P must lie"},
      {"/protocol/kappa", 0.0, "kappa"},
      {"/protocol/sigma_min", 0.0, "sigma_min"},
      {"/dp/epsilon", 0.0, "privacy budget"},
      {"/dp/clip", -1.0, "clip bound"},
      {"/dp/clip_mode", "layerwise", "clip_mode"},
      {"/dp/sigma", -0.5, "noise multiplier"},
      {"/metrics", {"accuracy"}, "unknown metric"},
      {"/reference", "tiny", "own reference"},
      {"/train/typo", 1, "unknown field"},
      {"/train/clients", "ten", "non-negative integer"},
      {"/task/n_channels", 2.5, "non-negative integer"},
  };
  for (const auto& m : mutations) {
    auto j = tiny_spec();
    j[json::json_pointer(m.pointer)] = m.value;
    const auto r = validate_spec(j);
    EXPECT_FALSE(r.ok()) << m.pointer;
    EXPECT_TRUE(mentions(r.errors, m.expect)) << m.pointer << " -> " << (r.errors.empty() ? "" : r.errors.front());
  }
  auto j = tiny_spec();
  j["protocol"]["sel"] = "All";
  EXPECT_TRUE(mentions(validate_spec(j).errors, "requires P = K"));
  j = tiny_spec();
  j["protocol"]["agg"] = "FedAvg";
  j["reference"] = "ref";
  j["metrics"] = {"lambda"};
  EXPECT_TRUE(mentions(validate_spec(j).errors, "RateW"));
}

TEST(ValidateSpec, ReportsAllViolationsNotTheFirst) {
  auto j = tiny_spec();
  j["train"]["clients"] = 0;
  j["dp"]["clip"] = 0.0;
  j["arch"]["beta"] = 2.0;
  j["extra"] = true;
  const auto r = validate_spec(j);
  EXPECT_EQ(r.errors.size(), 5u);  // K, P range, clip, beta, unknown field
}

TEST(ValidateSpec, MalformedTextIsAnErrorNotACrash) {
  EXPECT_FALSE(validate_spec(std::string("{ not json")).ok());
  EXPECT_FALSE(validate_spec(std::string("[1, 2]")).ok());
  EXPECT_FALSE(validate_spec(std::string("")).ok());
}

TEST(ValidateSpec, CanonicalJsonRoundTrips) {
  const auto s = parse(tiny_spec());
  const auto j = spec_to_json(s);
  const auto again = parse(j);
  EXPECT_EQ(spec_to_json(again), j);
  EXPECT_FALSE(j.contains("workers"));
  auto w = tiny_spec();
  w["workers"] = 4;
  EXPECT_EQ(config_hash(spec_to_json(parse(w))), config_hash(j));
}

TEST(Grid, DefaultGridMatchesAblationTable) {
  const auto g = expand_grid(json::parse(read_text(config("ablation_grid.json"))));
  ASSERT_TRUE(g.grid) << g.errors.front();
  struct Row {
    std::string id;
    double eps, c;
    std::string agg, sel;
    std::size_t n, p;
  };
  const double inf = INFINITY;
  const std::vector<Row> table{{"A0", inf, 0, "FedAvg", "All", 10, 10}, {"A1", 8, 0.5, "FedAvg", "All", 10, 10},
                               {"A2", 4, 0.5, "FedAvg", "All", 10, 10}, {"A3", 1, 0.5, "FedAvg", "All", 10, 10},
                               {"A4", 8, 0.5, "RateW", "DeltaR", 10, 5}, {"A5", 1, 1, "RateW", "DeltaR", 10, 5},
                               {"A6", 1, 2, "RateW", "DeltaR", 10, 5}};
  for (const auto& row : table) {
    const auto it = std::find_if(g.grid->specs.begin(), g.grid->specs.end(), [&](const auto& s) { return s.id == row.id; });
    ASSERT_NE(it, g.grid->specs.end()) << row.id;
    EXPECT_EQ(it->dp.enabled, !std::isinf(row.eps)) << row.id;
    if (it->dp.enabled) {
      EXPECT_EQ(it->dp.epsilon, row.eps) << row.id;
      EXPECT_EQ(it->dp.clip_c, row.c) << row.id;
    }
    EXPECT_EQ(to_string(it->protocol.agg), row.agg) << row.id;
    EXPECT_EQ(to_string(it->protocol.sel), row.sel) << row.id;
    EXPECT_EQ(it->train.clients, row.n) << row.id;
    EXPECT_EQ(it->protocol.p_select, row.p) << row.id;
    EXPECT_EQ(it->train.rounds, 10u);
    EXPECT_EQ(it->train.batch_size, 64u);
    EXPECT_EQ(it->train.epochs, 1u);
    EXPECT_EQ(it->train.alpha, 1.0);
    EXPECT_EQ(it->train.lr, 1e-3);
  }
  const auto e2 = std::find_if(g.grid->specs.begin(), g.grid->specs.end(), [](const auto& s) { return s.id == "E2"; });
  ASSERT_NE(e2, g.grid->specs.end());
  EXPECT_EQ(e2->dp.epsilon, 2.0);
  EXPECT_EQ(e2->note, "outside the ablation table");
}

TEST(Grid, SeedsReplicateCells) {
  json g = {{"name", "g"}, {"seeds", {1, 2, 3}}, {"defaults", tiny_spec()}, {"cells", {{{"id", "a"}}, {{"id", "b"}}}}};
  const auto r = expand_grid(g);
  ASSERT_TRUE(r.grid);
  ASSERT_EQ(r.grid->specs.size(), 6u);
  EXPECT_EQ(r.grid->specs[0].id, "a");
  EXPECT_EQ(r.grid->specs[2].seed, 3u);
  EXPECT_EQ(r.grid->specs[3].id, "b");
}

TEST(Grid, ReferenceRules) {
  auto base = tiny_spec();
  base.erase("dp");
  auto make = [&](json ref_cell, json cell) {
    return expand_grid({{"defaults", base}, {"cells", {ref_cell, cell}}});
  };
  const json ref = {{"id", "R"}};
  const json paired = {{"id", "T"}, {"dp", {{"epsilon", 1.0}, {"clip", 1.0}}}, {"reference", "R"}, {"metrics", {"rmse"}}};
  EXPECT_TRUE(make(ref, paired).grid);

  auto missing = paired;
  missing["reference"] = "nope";
  EXPECT_TRUE(mentions(make(ref, missing).errors, "not a cell"));

  auto dp_ref = ref;
  dp_ref["dp"] = {{"epsilon", 1.0}, {"clip", 1.0}};
  EXPECT_TRUE(mentions(make(dp_ref, paired).errors, "DP disabled"));

  auto other_protocol = ref;
  other_protocol["protocol"] = {{"agg", "FedAvg"}, {"sel", "All"}, {"select", 4}};
  EXPECT_TRUE(mentions(make(other_protocol, paired).errors, "different protocol"));

  auto other_k = ref;
  other_k["train"] = {{"clients", 5}, {"rounds", 2}, {"batch_size", 16}, {"lr", 0.01}};
  EXPECT_TRUE(mentions(make(other_k, paired).errors, "K, R or partition seed"));

  EXPECT_TRUE(mentions(make(ref, ref).errors, "duplicate id"));
}

TEST(RunExperiment, ReferenceShapedSummaryRow) {
  TempDir tmp("dpsnn_test_exp_ref");
  auto j = tiny_spec();
  j.erase("dp");
  j["id"] = "A0";
  j["protocol"] = {{"agg", "FedAvg"}, {"sel", "All"}};
  RunOptions opt;
  opt.sink = tmp.path;
  const auto res = run_experiment(parse(j), opt);
  const auto& h = summary_header();
  auto col = [&](const std::string& name) {
    return res.summary[static_cast<std::size_t>(std::find(h.begin(), h.end(), name) - h.begin())];
  };
  EXPECT_EQ(col("epsilon"), "inf");
  EXPECT_EQ(col("C"), "");
  EXPECT_EQ(col("realized_epsilon_max"), "");
  EXPECT_EQ(col("sigma_mean"), "");
  EXPECT_EQ(col("rmse_r"), "");
  EXPECT_EQ(col("N_P"), "4/4");
  EXPECT_TRUE(fs::exists(res.dir / kManifestFile));
  EXPECT_EQ(read_text(res.dir / kSummaryFile), csv_table(h, {res.summary}));
}

TEST(RunExperiment, PairedDpRunRespectsBudgetAndIsDeterministic) {
  TempDir tmp("dpsnn_test_exp_pair");
  auto ref_j = tiny_spec();
  ref_j.erase("dp");
  ref_j["id"] = "R";
  auto t_j = tiny_spec();
  t_j["id"] = "T";
  t_j["dp"]["epsilon"] = 1.0;
  t_j["reference"] = "R";
  t_j["metrics"] = {"rmse", "lambda", "tau"};
  RunOptions opt;
  opt.sink = tmp.path;
  const auto ref = run_experiment(parse(ref_j), opt);
  const auto t = parse(t_j);
  EXPECT_THROW(run_experiment(t, opt), ConfigError);  // paired metrics, no reference logs
  const auto a = run_experiment(t, opt, &ref.logs);
  for (const auto& log : a.logs)
    for (const auto& c : log.clients) {
      ASSERT_TRUE(c.epsilon);
      EXPECT_LE(*c.epsilon, 1.0);
    }
  EXPECT_THROW(run_experiment(t, opt, &ref.logs), IoError);  // same spec, same dir, no --force
  opt.force = true;
  opt.workers = 3;
  const auto b = run_experiment(t, opt, &ref.logs);
  EXPECT_EQ(a.dir, b.dir);
  EXPECT_EQ(a.summary, b.summary);
  EXPECT_EQ(a.logs, b.logs);
  const auto& h = summary_header();
  for (const auto& name : {"rmse_r", "dlambda_mean", "tau"}) {
    const auto i = static_cast<std::size_t>(std::find(h.begin(), h.end(), name) - h.begin());
    EXPECT_FALSE(a.summary[i].empty()) << name;
  }
}

TEST(RunExperiment, GridWritesOneRowPerCellInOrder) {
  TempDir tmp("dpsnn_test_exp_grid");
  auto base = tiny_spec();
  base.erase("dp");
  base["train"]["rounds"] = 1;
  json g = {{"name", "mini"},
            {"defaults", base},
            {"cells",
             {{{"id", "T"}, {"dp", {{"epsilon", 8.0}, {"clip", 0.5}}}, {"reference", "R"}, {"metrics", {"rmse"}}},
              {{"id", "R"}}}}};
  const auto r = expand_grid(g);
  ASSERT_TRUE(r.grid) << r.errors.front();
  RunOptions opt;
  opt.sink = tmp.path;
  const auto first = run_grid(*r.grid, opt);
  const auto csv = read_text(tmp.path / "mini_summary.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv.find("\nT,"), csv.find('\n'));
  opt.force = true;
  run_grid(*r.grid, opt);
  EXPECT_EQ(read_text(tmp.path / "mini_summary.csv"), csv);
}

TEST(RunExperiment, GoldenRoundLog) {
  // Frozen output of tiny_spec(): K=4, R=2, RateW/DeltaR, DP eps=4.
  TempDir tmp("dpsnn_test_exp_golden");
  RunOptions opt;
  opt.sink = tmp.path;
  const auto res = run_experiment(parse(tiny_spec()), opt);
  const fs::path golden = fs::path(DPSNN_TEST_DATA_DIR) / "golden_rounds.jsonl";
  if (std::getenv("DPSNN_UPDATE_GOLDEN")) fs::copy_file(res.dir / kRoundsFile, golden, fs::copy_options::overwrite_existing);
  ASSERT_TRUE(fs::exists(golden));
  EXPECT_EQ(read_text(res.dir / kRoundsFile), read_text(golden));
}

TEST(PlotData, ColumnsAndGroups) {
  TempDir tmp("dpsnn_test_exp_plot");
  RunOptions opt;
  opt.sink = tmp.path;
  auto ref_j = tiny_spec();
  ref_j.erase("dp");
  ref_j["id"] = "R";
  const auto ref = run_experiment(parse(ref_j), opt);
  const auto dp = run_experiment(parse(tiny_spec()), opt);
  const auto one = emit_plot_data({ref.dir}, PlotKind::layer_rates_by_eps);
  EXPECT_EQ(one.substr(0, one.find('\n')), "run,epsilon,client,layer,mean_rate");
  EXPECT_EQ(std::count(one.begin(), one.end(), '\n'), 1 + 4 * 2);  // 4 clients x 2 layers
  EXPECT_NE(one.find("\nR,inf,0,1,"), std::string::npos);
  const auto two = emit_plot_data({ref.dir, dp.dir}, PlotKind::layer_rates_by_eps);
  EXPECT_NE(two.find("\ntiny,4.0,"), std::string::npos);
  const auto hist = emit_plot_data({dp.dir}, PlotKind::client_histograms);
  EXPECT_EQ(hist.substr(0, hist.find('\n')), "run,client,class,train_count,val_count");
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 1 + 4 * 3);
  std::size_t total = 0;
  const auto manifest = read_manifest(dp.dir);
  for (const auto& c : manifest.at("partition"))
    for (auto n : c.at("train").get<std::vector<std::size_t>>()) total += n;
  EXPECT_EQ(total, 3u * 60u);
  EXPECT_THROW(emit_plot_data({tmp.path / "missing"}, PlotKind::layer_rates_by_eps), IoError);
  EXPECT_THROW(emit_plot_data({}, PlotKind::client_histograms), ConfigError);
}
