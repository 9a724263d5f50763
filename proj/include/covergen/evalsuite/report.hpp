// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace covergen::evalsuite {

// One measured number. Value must be finite and n positive.
struct MetricReport {
  std::string name;
  double value = 0.0;
  int64_t n = 0;
  std::string config_digest;
  // Free-form qualifier, e.g. "proxy" or "generated-vs-reference".
  std::string label;

  void validate() const;  // ArgumentError when value is not finite or n <= 0
  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricReport>& metrics);
void write_metrics_json(const std::filesystem::path& path, const std::vector<MetricReport>& metrics);
std::vector<MetricReport> read_metrics_json(const std::filesystem::path& path);

// Row-labelled table of numbers for plain-text comparison layouts.
struct Table {
  std::string title;
  std::vector<std::string> columns;  // excluding the row-label column
  std::vector<std::pair<std::string, std::vector<double>>> rows;
  int precision = 4;

  std::string to_markdown() const;
  std::string to_csv() const;
};

}  // namespace covergen::evalsuite
