#pragma once

// Plain-text key=value run configuration. Every key has a default; unknown
// keys are errors. The resolved form (all keys, sorted) is what gets hashed.

#include <advrsa/io.hpp>

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace advrsa {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> d = {
      {"seed", "1"},
      {"data.classes", "8"},
      {"data.train_per_class", "160"},
      {"data.val_per_class", "40"},
      {"data.image_size", "32"},
      {"data.noise_sd", "0.04"},
      {"train.epochs", "12"},
      {"train.learning_rate", "0.03"},
      {"train.lr_decay", "0.92"},
      {"train.momentum", "0.9"},
      {"train.batch_size", "8"},
      {"stimuli.count", "40"},
      {"stimuli.threshold", "0.99"},
      {"synth.threshold", "0.99"},
      {"synth.max_iterations", "5000"},
      {"synth.max_halvings", "20"},
      {"synth.direction", "sign"},
      {"synth.momentum", "0.9"},
      {"synth.an.lambda", "0.05"},
      {"synth.an.step", "0.05"},
      {"synth.an.init_noise", "0.1"},
      {"synth.ai.lambda", "0.01"},
      {"synth.ai.step", "0.005"},
      {"synth.ai.linf_budget", "0.1"},
      {"rsa.metric", "correlation"},
      {"rsa.n_perm", "1000"},
      {"rsa.n_boot", "1000"},
      {"rsa.ci_levels", "0.68,0.95"},
      {"encode.responses_re", ""},
      {"encode.responses_an", ""},
      {"encode.responses_ai", ""},
      {"encode.s_max", "20"},
      {"encode.candidates", "0"},
      {"encode.tolerance", "1e-6"},
      {"encode.standardize", "true"},
      {"encode.folds", "5"},
      {"encode.n_perm", "1000"},
      {"encode.n_boot", "1000"},
      {"encode.vertex_fraction", "0.8"},
      {"sim.grid", "20"},
      {"sim.spacing_mm", "1"},
      {"sim.layer", "conv3"},
      {"sim.support", "3"},
      {"sim.noise", "0.3"},
      {"searchlight.geometry", ""},
      {"searchlight.trial1", ""},
      {"searchlight.trial2", ""},
      {"searchlight.radius_mm", "3"},
      {"searchlight.top_n", "200"},
  };
  return d;
}

class RunConfig {
 public:
  RunConfig() : values_(config_defaults()) {}

  static RunConfig parse(std::string_view text, const std::string& name = "<config>") {
    RunConfig c;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      const std::string where = name + ":" + std::to_string(lineno);
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)), where);
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) { return parse(read_text_file(path), path.string()); }

  void set(const std::string& key, const std::string& value, const std::string& where = "<override>") {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    it->second = value;
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw std::logic_error("config key '" + key + "' has no default");
    return it->second;
  }

  double real(const std::string& key) const {
    try {
      return parse_double(str(key), "config key '" + key + "'");
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& s = str(key);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
      throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  bool flag(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + s + "'");
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& f : split_csv_line(str(key))) {
      try {
        out.push_back(parse_double(trim(f), "config key '" + key + "'"));
      } catch (const FormatError& e) {
        throw ConfigError(e.what());
      }
    }
    return out;
  }

  /// Every key with its value, sorted, one "key = value" per line.
  std::string resolved() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  /// Hash over the keys whose names start with any of `prefixes`.
  std::string hash(const std::vector<std::string>& prefixes) const {
    std::string text;
    for (const auto& [k, v] : values_) {
      for (const auto& p : prefixes) {
        if (k == p || k.starts_with(p + ".")) {
          text += k + "=" + v + "\n";
          break;
        }
      }
    }
    return hex64(fnv1a(text));
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  std::map<std::string, std::string> values_;
};

}  // namespace advrsa
