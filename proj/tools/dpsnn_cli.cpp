#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dpsnn/experiment.hpp"

namespace fs = std::filesystem;
using namespace dpsnn;

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeError = 2;
constexpr int kConfigError = 1;

json read_json_file(const std::string& path) {
  const auto text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": not valid JSON: " + e.what());
  }
}

void report(const std::string& what, const std::vector<std::string>& errors) {
  std::cerr << what << ": " << errors.size() << " violation(s)\n";
  for (const auto& e : errors) std::cerr << "  " << e << "\n";
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-")
    std::cout << text;
  else
    write_text(out, text);
}

/// Finds the run directory of `id` with the given master seed under `sink`.
std::optional<fs::path> find_run(const fs::path& sink, const std::string& id, std::uint64_t seed) {
  if (!fs::exists(sink)) return std::nullopt;
  std::vector<fs::path> hits;
  for (const auto& e : fs::directory_iterator(sink)) {
    if (!e.is_directory() || !fs::exists(e.path() / kManifestFile)) continue;
    const auto m = read_manifest(e.path());
    if (m.value("experiment_id", "") == id && m.at("seeds").value("master", std::uint64_t{0}) == seed)
      hits.push_back(e.path());
  }
  if (hits.size() > 1) throw ConfigError("several runs of \"" + id + "\" under " + sink.string() + "; pass --reference-dir");
  if (hits.empty()) return std::nullopt;
  return hits.front();
}

std::vector<RoundLog> reference_logs(const ExperimentSpec& s, const std::string& ref_dir, const fs::path& sink) {
  fs::path dir;
  if (!ref_dir.empty()) {
    dir = ref_dir;
  } else {
    auto found = find_run(sink, *s.reference, s.seed);
    if (!found)
      throw ConfigError("reference run \"" + *s.reference + "\" (seed " + std::to_string(s.seed) + ") not found under " +
                        sink.string() + "; run it first or pass --reference-dir");
    dir = *found;
  }
  const auto manifest = read_manifest(dir);
  if (manifest.value("experiment_id", "") != *s.reference)
    throw ConfigError(dir.string() + " holds \"" + manifest.value("experiment_id", "") + "\", expected reference \"" +
                      *s.reference + "\"");
  return read_round_logs(dir / kRoundsFile);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentially private federated spiking networks: experiments and metrics"};
  app.require_subcommand(1);

  std::string path, sink = "runs", ref_dir, out, kind = "layer_rates_by_eps", run_a, run_b;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> dirs, metrics{"rmse", "lambda", "tau"};
  bool force = false, quiet = false;

  auto* run = app.add_subcommand("run", "Run one experiment spec");
  run->add_option("spec", path, "Experiment spec (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--sink", sink, "Directory that receives run directories");
  run->add_option("--seed", seed, "Override the master seed");
  run->add_option("--workers", workers, "Client-training threads (does not change results)")->check(CLI::PositiveNumber);
  run->add_option("--reference-dir", ref_dir, "Run directory of the paired reference");
  run->add_flag("--force", force, "Overwrite an existing run directory");
  run->add_flag("--quiet", quiet, "No per-round progress");

  auto* grid = app.add_subcommand("grid", "Run every cell of a grid and write a summary table");
  grid->add_option("grid", path, "Grid file (JSON)")->required()->check(CLI::ExistingFile);
  grid->add_option("--sink", sink, "Directory that receives run directories");
  grid->add_option("--seeds", seeds, "Override the grid's seed list")->delimiter(',');
  grid->add_option("--workers", workers, "Client-training threads (does not change results)")->check(CLI::PositiveNumber);
  grid->add_flag("--force", force, "Overwrite existing run directories");
  grid->add_flag("--quiet", quiet, "No per-round progress");

  auto* validate = app.add_subcommand("validate", "Check a spec or grid file and list every violation");
  validate->add_option("file", path, "Spec or grid file (JSON)")->required()->check(CLI::ExistingFile);

  auto* met = app.add_subcommand("metrics", "Paired metrics between a run and its reference");
  met->add_option("run", run_a, "Treatment run directory")->required()->check(CLI::ExistingDirectory);
  met->add_option("reference", run_b, "Reference run directory")->required()->check(CLI::ExistingDirectory);
  met->add_option("--metric", metrics, "Any of rmse, lambda, tau")->delimiter(',')
      ->check(CLI::IsMember({"rmse", "lambda", "tau"}));
  met->add_option("--out", out, "CSV output file (default stdout)");

  auto* plot = app.add_subcommand("plot-data", "Tables for plotting");
  plot->add_option("--kind", kind, "layer_rates_by_eps or client_histograms")
      ->check(CLI::IsMember({"layer_rates_by_eps", "client_histograms"}));
  plot->add_option("runs", dirs, "Run directories")->required();
  plot->add_option("--out", out, "CSV output file (default stdout)");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic train/val/test spike files of a spec");
  gen->add_option("spec", path, "Experiment spec (JSON); only its task section is used")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    RunOptions opt;
    opt.sink = sink;
    opt.force = force;
    opt.workers = workers;
    opt.progress = quiet ? nullptr : &std::cerr;

    if (*validate) {
      const auto j = read_json_file(path);
      if (j.is_object() && j.contains("cells")) {
        const auto g = expand_grid(j);
        if (!g.grid) return report(path, g.errors), kConfigError;
        std::cout << path << ": ok (" << g.grid->specs.size() << " runs)\n";
      } else {
        const auto r = validate_spec(j);
        if (!r.spec) return report(path, r.errors), kConfigError;
        std::cout << path << ": ok\n";
      }
      return kOk;
    }

    if (*run) {
      auto r = validate_spec(read_json_file(path));
      if (!r.spec) return report(path, r.errors), kConfigError;
      auto s = *r.spec;
      if (seed) s.seed = *seed;
      std::optional<std::vector<RoundLog>> ref;
      if (!s.metrics.empty()) ref = reference_logs(s, ref_dir, opt.sink);
      const auto res = run_experiment(s, opt, ref ? &*ref : nullptr);
      std::cout << res.dir.string() << "\n" << csv_table(summary_header(), {res.summary});
      return kOk;
    }

    if (*grid) {
      auto j = read_json_file(path);
      if (!seeds.empty()) j["seeds"] = seeds;
      const auto g = expand_grid(j);
      if (!g.grid) return report(path, g.errors), kConfigError;
      const auto results = run_grid(*g.grid, opt);
      for (const auto& r : results) std::cout << r.dir.string() << "\n";
      std::cout << (opt.sink / (g.grid->name + "_summary.csv")).string() << "\n";
      return kOk;
    }

    if (*met) {
      const auto t = read_round_logs(fs::path(run_a) / kRoundsFile);
      const auto r = read_round_logs(fs::path(run_b) / kRoundsFile);
      std::vector<std::vector<std::string>> rows;
      auto want = [&](const std::string& m) { return std::find(metrics.begin(), metrics.end(), m) != metrics.end(); };
      if (want("rmse"))
        for (auto m : {RateMetric::network_rate, RateMetric::layer_rates, RateMetric::activation_sparsity,
                       RateMetric::footprint}) {
          const auto v = rmse_metric(t, r, m);
          rows.push_back({"rmse_" + to_string(m), csv_number(v.value), csv_number(v.per_round.half_width),
                          std::to_string(v.pairs)});
        }
      if (want("lambda")) {
        const auto d = lambda_deviation(t, r);
        rows.push_back({"dlambda_mean", csv_number(d.mean), csv_number(d.per_round.half_width), std::to_string(d.events)});
        rows.push_back({"dlambda_sum", csv_number(d.sum), "", std::to_string(d.events)});
        rows.push_back({"dlambda_percent", csv_number(d.percent), csv_number(100.0 * d.per_round.half_width),
                        std::to_string(d.events)});
      }
      if (want("tau")) {
        const auto k = ranking_stability(t, r);
        rows.push_back({"tau", csv_number(k.tau.mean), csv_number(k.tau.half_width), std::to_string(k.rounds.size())});
      }
      emit(csv_table({"metric", "value", "ci95_half_width", "n"}, rows), out);
      return kOk;
    }

    if (*plot) {
      std::vector<fs::path> paths(dirs.begin(), dirs.end());
      emit(emit_plot_data(paths, kind == "client_histograms" ? PlotKind::client_histograms : PlotKind::layer_rates_by_eps),
           out);
      return kOk;
    }

    if (*gen) {
      auto r = validate_spec(read_json_file(path));
      if (!r.spec) return report(path, r.errors), kConfigError;
      if (r.spec->data) throw ConfigError("gen-data: spec reads spike files; nothing to generate");
      const auto d = load_data(*r.spec);
      fs::create_directories(out);
      save_spike_file(fs::path(out) / "train.spk", d.train);
      save_spike_file(fs::path(out) / "val.spk", d.val);
      save_spike_file(fs::path(out) / "test.spk", d.test);
      std::cout << out << ": " << d.train.size() << " train, " << d.val.size() << " val, " << d.test.size()
                << " test samples\n";
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}
