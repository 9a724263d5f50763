// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace covergen {

// Flat typed key/value configuration. Keys are dotted (`world.n_items`);
// files may also group keys under `[section]` headers, which prefix every
// following key. The type of each key is fixed by its default, so a file can
// only override known keys with values of the right type.
//
//   # comment
//   [world]
//   n_items = 400
//   noise_sigma = 0.1
//   align.lambda_per = 0.25
class Config {
 public:
  using Value = std::variant<bool, int64_t, double, std::string>;

  // All recognised keys with their defaults.
  static Config defaults();

  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, const std::string& origin = "<text>");
  // `key=value` override; the value is parsed with the key's declared type.
  void set(const std::string& key, const std::string& value);
  void set_value(const std::string& key, Value value);

  bool get_bool(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  std::vector<std::string> keys() const;

  // Canonical `key = value` text, sorted by key; stable across runs.
  std::string to_text() const;
  nlohmann::json to_json() const;

 private:
  const Value& at(const std::string& key) const;
  std::map<std::string, Value> values_;
};

}  // namespace covergen
