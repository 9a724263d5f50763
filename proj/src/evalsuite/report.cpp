// SPDX-License-Identifier: Apache-2.0
#include "covergen/evalsuite/report.hpp"

#include "covergen/common/errors.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace covergen::evalsuite {

void MetricReport::validate() const {
  if (!std::isfinite(value)) throw ArgumentError("metric '" + name + "' is not finite");
  if (n <= 0) throw ArgumentError("metric '" + name + "' has no samples");
}

nlohmann::json MetricReport::to_json() const {
  return {{"name", name}, {"value", value}, {"n", n}, {"config_digest", config_digest}, {"label", label}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport m;
  m.name = j.at("name").get<std::string>();
  m.value = j.at("value").get<double>();
  m.n = j.at("n").get<int64_t>();
  m.config_digest = j.value("config_digest", "");
  m.label = j.value("label", "");
  return m;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricReport>& metrics) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "name,value,n,label,config_digest\n" << std::setprecision(10);
  for (const auto& m : metrics) {
    m.validate();
    out << m.name << ',' << m.value << ',' << m.n << ',' << m.label << ',' << m.config_digest << '\n';
  }
}

void write_metrics_json(const std::filesystem::path& path, const std::vector<MetricReport>& metrics) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : metrics) {
    m.validate();
    arr.push_back(m.to_json());
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << arr.dump(2) << '\n';
}

std::vector<MetricReport> read_metrics_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::vector<MetricReport> out;
  for (const auto& j : nlohmann::json::parse(in)) out.push_back(MetricReport::from_json(j));
  return out;
}

std::string Table::to_markdown() const {
  std::ostringstream s;
  if (!title.empty()) s << "### " << title << "\n\n";
  s << "| |";
  for (const auto& c : columns) s << ' ' << c << " |";
  s << "\n|---|";
  for (size_t i = 0; i < columns.size(); ++i) s << "---:|";
  s << '\n' << std::fixed << std::setprecision(precision);
  for (const auto& [label, values] : rows) {
    s << "| " << label << " |";
    for (double v : values) s << ' ' << v << " |";
    s << '\n';
  }
  return s.str();
}

std::string Table::to_csv() const {
  std::ostringstream s;
  s << "row";
  for (const auto& c : columns) s << ',' << c;
  s << '\n' << std::setprecision(10);
  for (const auto& [label, values] : rows) {
    s << label;
    for (double v : values) s << ',' << v;
    s << '\n';
  }
  return s.str();
}

}  // namespace covergen::evalsuite
