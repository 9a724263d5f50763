// SPDX-License-Identifier: Apache-2.0
#include "covergen/cli/manifest.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/tensor_io.hpp"

#include <chrono>
#include <fstream>

namespace covergen::cli {

namespace fs = std::filesystem;

nlohmann::json StageRecord::to_json() const {
  nlohmann::json m = nlohmann::json::array();
  for (const auto& x : metrics) m.push_back(x.to_json());
  return {{"command", command}, {"config", config},   {"seed", seed},    {"inputs", inputs},
          {"outputs", outputs}, {"wall_seconds", wall_seconds}, {"metrics", m}};
}

StageRecord StageRecord::from_json(const nlohmann::json& j) {
  StageRecord r;
  r.command = j.value("command", "");
  r.config = j.value("config", "");
  r.seed = j.value("seed", uint64_t{0});
  r.inputs = j.value("inputs", std::map<std::string, std::string>{});
  r.outputs = j.value("outputs", std::map<std::string, std::string>{});
  r.wall_seconds = j.value("wall_seconds", 0.0);
  const auto metrics = j.value("metrics", nlohmann::json::array());
  for (const auto& m : metrics) {
    r.metrics.push_back(evalsuite::MetricReport::from_json(m));
  }
  return r;
}

RunManifest::RunManifest(fs::path root) : root_(std::move(root)) {
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  run_id_ = "run-" + std::to_string(std::chrono::duration_cast<std::chrono::seconds>(now).count());
}

RunManifest RunManifest::load(const fs::path& root) {
  RunManifest m(root);
  const auto path = root / "manifest.json";
  if (!fs::exists(path)) return m;
  std::ifstream in(path);
  const auto j = nlohmann::json::parse(in);
  m.run_id_ = j.value("run_id", m.run_id_);
  const auto stages = j.value("stages", nlohmann::json::object());
  for (const auto& [name, rec] : stages.items()) {
    m.stages_[name] = StageRecord::from_json(rec);
  }
  m.verify();
  return m;
}

void RunManifest::save() const {
  nlohmann::json stages = nlohmann::json::object();
  for (const auto& [name, rec] : stages_) stages[name] = rec.to_json();
  fs::create_directories(root_);
  const auto tmp = root_ / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw ConfigError("cannot write manifest under " + root_.string());
    out << nlohmann::json{{"run_id", run_id_}, {"stages", stages}}.dump(2) << '\n';
  }
  fs::rename(tmp, root_ / "manifest.json");
}

const StageRecord& RunManifest::stage(const std::string& stage) const {
  auto it = stages_.find(stage);
  if (it == stages_.end()) throw MissingDependency("manifest stage " + stage, stage.substr(0, stage.find('/')));
  return it->second;
}

void RunManifest::record(const std::string& stage, StageRecord record) { stages_[stage] = std::move(record); }

std::string RunManifest::digest_of(const fs::path& relative) const { return digest_file(root_ / relative); }

void RunManifest::verify() const {
  for (const auto& [name, rec] : stages_) {
    for (const auto& [path, digest] : rec.outputs) {
      const auto full = root_ / path;
      if (!fs::exists(full)) {
        throw ConfigError("artifact " + path + " recorded by `" + name + "` is missing; re-run that stage");
      }
      if (digest_file(full) != digest) {
        throw ConfigError("artifact " + path + " changed since `" + name + "` wrote it; re-run that stage");
      }
    }
  }
}

}  // namespace covergen::cli
