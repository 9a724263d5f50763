// SPDX-License-Identifier: Apache-2.0
#include "covergen/common/config.hpp"

#include "covergen/common/errors.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace covergen {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

Config::Value parse_as(const Config::Value& like, const std::string& key, const std::string& raw) {
  const std::string text = trim(raw);
  auto fail = [&](const char* type) {
    return ConfigError("config key '" + key + "' expects " + type + ", got '" + text + "'");
  };
  if (std::holds_alternative<bool>(like)) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw fail("a boolean");
  }
  if (std::holds_alternative<int64_t>(like)) {
    int64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) throw fail("an integer");
    return v;
  }
  if (std::holds_alternative<double>(like)) {
    try {
      size_t used = 0;
      double v = std::stod(text, &used);
      if (used != text.size()) throw fail("a real number");
      return v;
    } catch (const std::logic_error&) {
      throw fail("a real number");
    }
  }
  std::string s = text;
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::string render(const Config::Value& v) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, bool>) {
          return x ? "true" : "false";
        } else if constexpr (std::is_same_v<T, int64_t>) {
          return std::to_string(x);
        } else if constexpr (std::is_same_v<T, double>) {
          std::ostringstream os;
          os << std::setprecision(17) << x;
          return os.str();
        } else {
          return "\"" + x + "\"";
        }
      },
      v);
}

}  // namespace

Config Config::defaults() {
  Config c;
  auto& v = c.values_;
  v["run.seed"] = int64_t{1234};
  v["run.deterministic"] = true;

  // Synthetic world.
  v["world.n_items"] = int64_t{400};
  v["world.n_users"] = int64_t{400};
  v["world.per_user"] = int64_t{20};
  v["world.noise_sigma"] = 0.1;
  v["world.selection_temperature"] = 0.15;
  v["world.history_fraction"] = 0.8;
  v["world.corpus_size"] = int64_t{2000};

  // Joint embedder.
  v["embedder.dim"] = int64_t{64};
  v["embedder.epochs"] = int64_t{20};
  v["embedder.batch"] = int64_t{64};
  v["embedder.temperature"] = 0.1;
  v["embedder.lr"] = 2e-3;

  // Context encoder and meta tokens.
  v["context.meta_tokens"] = int64_t{2};
  v["context.hidden"] = int64_t{128};
  v["context.layers"] = int64_t{2};
  v["context.heads"] = int64_t{4};
  v["context.steps"] = int64_t{1200};
  v["context.batch"] = int64_t{32};
  v["context.lr"] = 1e-3;
  v["context.transform_strength"] = 0.3;

  // User encoder.
  v["user.dim"] = int64_t{32};
  v["user.epochs"] = int64_t{30};
  v["user.batch"] = int64_t{128};
  v["user.lr"] = 3e-3;

  // Personalized context fusion.
  v["fusion.context_tokens"] = int64_t{2};
  v["fusion.user_tokens"] = int64_t{2};
  v["fusion.dim"] = int64_t{64};

  // Diffusion.
  v["diffusion.timesteps"] = int64_t{1000};
  v["diffusion.beta_start"] = 1e-4;
  v["diffusion.beta_end"] = 0.02;
  v["diffusion.channels"] = int64_t{16};
  v["diffusion.heads"] = int64_t{1};
  v["diffusion.steps"] = int64_t{2500};
  v["diffusion.batch"] = int64_t{32};
  v["diffusion.lr"] = 1e-3;
  v["diffusion.cond_dropout"] = 0.1;

  // Sampling.
  v["sample.steps"] = int64_t{15};
  v["sample.guidance"] = 7.0;
  v["sample.seed"] = int64_t{99};

  // Personalized reward model.
  v["reward.k1"] = int64_t{3};
  v["reward.k2"] = int64_t{3};
  v["reward.width"] = int64_t{64};
  v["reward.layers"] = int64_t{2};
  v["reward.heads"] = int64_t{4};
  v["reward.epochs"] = int64_t{60};
  v["reward.batch"] = int64_t{64};
  v["reward.lr"] = 1e-4;
  v["reward.patience"] = int64_t{5};

  // Two-stage alignment.
  v["align.lambda_h"] = 0.05;
  v["align.lambda_per"] = 1.0;
  v["align.lambda_p"] = 0.5;
  v["align.lambda_r"] = 0.1;
  v["align.stage1_steps"] = int64_t{100};
  v["align.stage2_steps"] = int64_t{600};
  v["align.batch"] = int64_t{8};
  v["align.lr"] = 5e-4;
  v["align.t_lo"] = 0.1;
  v["align.t_hi"] = 0.9;
  v["align.use_meta"] = true;
  v["align.use_user"] = true;
  v["align.center_per"] = true;

  // Evaluation.
  v["context.heldout"] = int64_t{200};
  v["eval.win_trials"] = int64_t{500};
  v["eval.n_items"] = int64_t{64};
  v["recsys.k"] = int64_t{10};
  v["recsys.epochs"] = int64_t{10};
  v["recsys.seeds"] = int64_t{3};
  v["recsys.temperature"] = 0.5;
  v["recsys.id_dim"] = int64_t{8};
  v["recsys.generated_per_user"] = int64_t{4};
  return c;
}

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path.string());
}

void Config::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set(key, line.substr(eq + 1));
  }
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = parse_as(it->second, key, value);
}

void Config::set_value(const std::string& key, Value value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  if (it->second.index() != value.index()) throw ConfigError("type mismatch for config key '" + key + "'");
  it->second = std::move(value);
}

const Config::Value& Config::at(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

bool Config::get_bool(const std::string& key) const {
  const auto* v = std::get_if<bool>(&at(key));
  if (!v) throw ConfigError("config key '" + key + "' is not a boolean");
  return *v;
}

int64_t Config::get_int(const std::string& key) const {
  const auto* v = std::get_if<int64_t>(&at(key));
  if (!v) throw ConfigError("config key '" + key + "' is not an integer");
  return *v;
}

double Config::get_double(const std::string& key) const {
  const auto* v = std::get_if<double>(&at(key));
  if (!v) throw ConfigError("config key '" + key + "' is not a real number");
  return *v;
}

const std::string& Config::get_string(const std::string& key) const {
  const auto* v = std::get_if<std::string>(&at(key));
  if (!v) throw ConfigError("config key '" + key + "' is not a string");
  return *v;
}

std::vector<std::string> Config::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : values_) out.push_back(k);
  return out;
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + render(v) + "\n";
  return out;
}

nlohmann::json Config::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) {
    std::visit([&](const auto& x) { j[k] = x; }, v);
  }
  return j;
}

}  // namespace covergen
