#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include "dpsr/binary_io.hpp"
#include "dpsr/common.hpp"
#include "dpsr/hashing.hpp"

namespace dpsr {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::filesystem::path manifest_path(const std::filesystem::path& artifact) {
  return artifact.string() + ".manifest.json";
}

/// Record of one command run: resolved configuration and the content hashes
/// of everything it read and wrote.
class RunManifest {
 public:
  RunManifest(std::string command, nlohmann::json config, std::uint64_t seed)
      : command_(std::move(command)), config_(std::move(config)), seed_(seed), started_(utc_timestamp()) {}

  void add_input(const std::string& role, const std::filesystem::path& path) {
    inputs_[role] = {{"path", path.string()}, {"sha256", sha256_file(path)}};
  }
  void add_output(const std::string& role, const std::filesystem::path& path) {
    outputs_[role] = {{"path", path.string()}, {"sha256", sha256_file(path)}};
    written_.push_back(path);
  }
  void set_report(nlohmann::json report) { report_ = std::move(report); }

  nlohmann::json to_json() const {
    return {{"command", command_}, {"config", config_},   {"seed", seed_},
            {"inputs", inputs_},   {"outputs", outputs_}, {"report", report_},
            {"started_at", started_}, {"finished_at", utc_timestamp()}};
  }

  /// Writes the manifest next to every output (or to `fallback` when the
  /// command produced no artifact).
  void write(const std::filesystem::path& fallback = {}) const {
    const auto text = to_json().dump(2) + "\n";
    for (const auto& p : written_) io::write_file_atomic(manifest_path(p), text);
    if (written_.empty() && !fallback.empty()) io::write_file_atomic(fallback, text);
  }

 private:
  std::string command_;
  nlohmann::json config_;
  std::uint64_t seed_;
  std::string started_;
  nlohmann::json inputs_ = nlohmann::json::object();
  nlohmann::json outputs_ = nlohmann::json::object();
  nlohmann::json report_ = nlohmann::json::object();
  std::vector<std::filesystem::path> written_;
};

/// If the artifact has a manifest beside it, its recorded hash must match the
/// bytes on disk. Returns false when there is no manifest to check against.
inline bool verify_artifact(const std::filesystem::path& artifact) {
  require(std::filesystem::exists(artifact), ErrorKind::kNotFound, "missing artifact " + artifact.string());
  const auto mpath = manifest_path(artifact);
  if (!std::filesystem::exists(mpath)) return false;
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_file(mpath));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::kCorrupt, mpath.string() + ": " + e.what());
  }
  const auto name = artifact.filename().string();
  const auto outputs = m.value("outputs", nlohmann::json::object());
  for (const auto& [role, entry] : outputs.items()) {
    if (std::filesystem::path(entry.at("path").get<std::string>()).filename() != name) continue;
    const auto expected = entry.at("sha256").get<std::string>();
    const auto actual = sha256_file(artifact);
    require(expected == actual, ErrorKind::kHashMismatch,
            artifact.string() + ": sha256 " + actual + " does not match manifest (" + expected + ")");
    return true;
  }
  fail(ErrorKind::kCorrupt, mpath.string() + " does not list " + name);
}

}  // namespace dpsr
