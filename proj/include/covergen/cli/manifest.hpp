// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/evalsuite/report.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace covergen::cli {

// What one subcommand consumed and produced. Paths are relative to the
// artifact root; digests are SHA-256 of the file bytes.
struct StageRecord {
  std::string command;  // full command line
  std::string config;   // resolved config text
  uint64_t seed = 0;
  std::map<std::string, std::string> inputs, outputs;
  double wall_seconds = 0.0;
  std::vector<evalsuite::MetricReport> metrics;

  nlohmann::json to_json() const;
  static StageRecord from_json(const nlohmann::json& j);
};

// `manifest.json` at the artifact root. Stages are keyed by name (and tag,
// as `align/<tag>`); re-running a stage replaces its record.
class RunManifest {
 public:
  explicit RunManifest(std::filesystem::path root);

  // Reads the manifest if present. Every recorded output must still exist with
  // its recorded digest; otherwise ConfigError names the stage to re-run.
  static RunManifest load(const std::filesystem::path& root);
  void save() const;

  const std::string& run_id() const { return run_id_; }
  bool has(const std::string& stage) const { return stages_.count(stage) != 0; }
  const StageRecord& stage(const std::string& stage) const;
  void record(const std::string& stage, StageRecord record);
  const std::map<std::string, StageRecord>& stages() const { return stages_; }

  // Relative path → digest for files under the root.
  std::string digest_of(const std::filesystem::path& relative) const;
  const std::filesystem::path& root() const { return root_; }

  // Throws ConfigError if a recorded output is missing or its digest differs.
  void verify() const;

 private:
  std::filesystem::path root_;
  std::string run_id_;
  std::map<std::string, StageRecord> stages_;
};

}  // namespace covergen::cli
