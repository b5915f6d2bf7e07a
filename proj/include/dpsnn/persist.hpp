#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dpsnn/errors.hpp"
#include "dpsnn/round_log.hpp"

namespace dpsnn {

inline constexpr std::string_view kCodeVersion = "0.1.0";
inline constexpr std::string_view kRoundsFile = "rounds.jsonl";
inline constexpr std::string_view kManifestFile = "manifest.json";
inline constexpr std::string_view kSummaryFile = "summary.csv";

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// 16 hex digits of FNV-1a over the canonical (key-sorted, compact) JSON dump.
inline std::string config_hash(const nlohmann::json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

inline std::filesystem::path run_dir(const std::filesystem::path& sink, const std::string& id,
                                     const nlohmann::json& config) {
  return sink / (id + "_" + config_hash(config));
}

inline std::string round_log_line(const RoundLog& log) { return nlohmann::json(log).dump(); }

inline std::vector<RoundLog> read_round_logs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open round log " + path.string());
  std::vector<RoundLog> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<RoundLog>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(n) + ": malformed round record: " + e.what());
    }
    if (out.back().schema != kRoundLogSchema)
      throw IoError(path.string() + ":" + std::to_string(n) + ": unsupported schema " +
                    std::to_string(out.back().schema));
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Single writer for one run directory: `<sink>/<id>_<hash>/` holding manifest.json and an
/// append-only rounds.jsonl. Refuses an existing directory unless `force`, which clears it.
class RunWriter {
 public:
  RunWriter(const std::filesystem::path& sink, const std::string& id, const nlohmann::json& config,
            const nlohmann::json& seeds, bool force, const nlohmann::json& extra = nlohmann::json::object()) {
    namespace fs = std::filesystem;
    dir_ = run_dir(sink, id, config);
    std::error_code ec;
    if (fs::exists(dir_)) {
      if (!force)
        throw IoError("run directory " + dir_.string() + " already exists (same spec); pass --force to overwrite");
      fs::remove_all(dir_, ec);
      if (ec) throw IoError("cannot clear " + dir_.string() + ": " + ec.message());
    }
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());
    nlohmann::json manifest = {{"experiment_id", id},
                               {"config_hash", config_hash(config)},
                               {"code_version", std::string(kCodeVersion)},
                               {"schema", kRoundLogSchema},
                               {"seeds", seeds},
                               {"config", config},
                               {"rounds_file", std::string(kRoundsFile)}};
    for (const auto& [k, v] : extra.items()) manifest[k] = v;
    write_text(dir_ / kManifestFile, manifest.dump(2) + "\n");
    rounds_.open(dir_ / kRoundsFile, std::ios::binary | std::ios::app);
    if (!rounds_) throw IoError("cannot open " + (dir_ / kRoundsFile).string());
  }

  const std::filesystem::path& dir() const { return dir_; }

  void append(const RoundLog& log) {
    rounds_ << round_log_line(log) << '\n';
    rounds_.flush();
    if (!rounds_) throw IoError("write failed for " + (dir_ / kRoundsFile).string());
  }

 private:
  std::filesystem::path dir_;
  std::ofstream rounds_;
};

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  try {
    return nlohmann::json::parse(read_text(dir / kManifestFile));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
}

/// Shortest round-trip decimal for doubles; CSV cells are reproducible byte for byte.
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  return nlohmann::json(v).dump();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += csv_escape(cells[i]);
    }
    out += '\n';
  };
  line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw ConfigError("csv: row width does not match header");
    line(r);
  }
  return out;
}

}  // namespace dpsnn
