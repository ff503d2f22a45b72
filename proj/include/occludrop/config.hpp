#pragma once

// Flat `section.key = value` experiment configuration.
//
// Every valid key has a built-in default. Values are layered: defaults, then
// a config file, then command-line overrides; later layers win. Seeds left at
// "auto" are derived from seed.base.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "occludrop/data.hpp"
#include "occludrop/errors.hpp"

namespace occludrop {

struct ConfigKey {
  const char* name;
  const char* default_value;
  const char* help;
};

inline const std::vector<ConfigKey>& config_registry() {
  static const std::vector<ConfigKey> keys = {
      {"model.in_channels", "1", "input image channels"},
      {"model.image_size", "64", "input side length (multiple of 16)"},
      {"model.width_base", "16", "stage-1 channel count; doubles per stage"},
      {"model.embedding_dim", "128", "embedding length"},
      {"lcd.stage", "3", "insertion stage (1..4)"},
      {"lcd.gamma_min", "auto", "minimum dropped channels per sample (auto: c/10)"},
      {"lcd.gamma_max", "auto", "maximum dropped channels per sample (auto: 6c/10)"},
      {"lcd.order", "bn_then_lcd", "bn_then_lcd | lcd_then_maskedbn"},
      {"lcd.seed", "auto", "mask stream seed (auto: seed.dropout)"},
      {"sam.enabled", "false", "channel attention at the insertion point"},
      {"sam.squash", "logistic", "logistic | identity"},
      {"sam.c_mid", "0", "1x1 conv output channels (0: c/4)"},
      {"sam.hidden", "0", "hidden units of the first fc layer (0: c)"},
      {"strategy.name", "none", "none | cutout | dropblock | wcd | lcd | image_template"},
      {"strategy.cutout.box_size", "16", "cutout square side in pixels"},
      {"strategy.dropblock.block_size", "3", "dropblock square side"},
      {"strategy.dropblock.drop_prob", "0.1", "dropblock target drop rate"},
      {"strategy.wcd.keep_ratio", "0.6", "fraction of channels retained"},
      {"strategy.image_template.min_fraction", "0.2", "smallest rectangle side fraction"},
      {"strategy.image_template.max_fraction", "0.5", "largest rectangle side fraction"},
      {"strategy.image_template.fill", "0.5", "rectangle gray level"},
      {"loss.alpha", "100", "filter orthogonality weight"},
      {"loss.beta", "1", "response orthogonality weight"},
      {"loss.margin", "0.5", "additive angular margin"},
      {"loss.scale", "64", "logit scale"},
      {"loss.epsilon", "1e-8", "norm guard of the orthogonality losses"},
      {"sr.column_rule", "x_offset", "x_offset | y_offset"},
      {"bn.momentum", "0.9", "running statistics momentum"},
      {"bn.epsilon", "1e-5", "variance guard"},
      {"optim.lr", "0.1", "initial learning rate"},
      {"optim.momentum", "0.9", "SGD momentum"},
      {"optim.weight_decay", "5e-4", "L2 penalty on conv/linear weights"},
      {"optim.epochs", "30", "training epochs"},
      {"optim.batch_size", "64", "mini-batch size"},
      {"optim.milestones", "0.6,0.85", "epoch fractions where lr decays"},
      {"optim.decay", "0.1", "lr multiplier at each milestone"},
      {"data.source", "synthetic", "synthetic | directory"},
      {"data.root", "", "image root for data.source = directory"},
      {"data.ids", "64", "synthetic identities"},
      {"data.images_per_id", "100", "synthetic images per identity"},
      {"data.train_fraction", "0.8", "per-identity train share"},
      {"data.noise", "0.03", "synthetic pixel noise std"},
      {"data.jitter", "1.0", "synthetic per-image variation scale"},
      {"eval.far_targets", "1e-2,1e-3", "FAR operating points"},
      {"eval.occluder_min", "0.3", "occluder side fraction, lower bound"},
      {"eval.occluder_max", "0.5", "occluder side fraction, upper bound"},
      {"eval.occluder_fill", "0.5", "occluder gray level"},
      {"eval.batch_size", "128", "inference batch size"},
      {"mse.normalize", "true", "compare length-normalized embeddings"},
      {"mse.stage", "3", "stage of the forced drop"},
      {"mse.gamma_min", "auto", "forced drop count, lower bound (auto: c/10)"},
      {"mse.gamma_max", "auto", "forced drop count, upper bound (auto: 6c/10)"},
      {"mse.samples", "0", "test images used (0: all)"},
      {"seed.base", "1", "root seed"},
      {"seed.data", "auto", "dataset seed"},
      {"seed.init", "auto", "weight initialization seed"},
      {"seed.dropout", "auto", "training stream seed (shuffling, strategies)"},
      {"seed.eval", "auto", "occluded split seed"},
      {"run.precision", "32", "32 | 64"},
      {"run.deterministic", "false", "single-threaded data preparation"},
      {"run.log_every", "1", "record every n-th step"},
      {"run.checkpoint", "true", "write final checkpoint"},
      {"experiment.seeds", "1", "seed.base values for ablate / place-sweep / mse-exp"},
      {"experiment.stages", "2,3,4", "insertion stages compared by place-sweep"},
      {"eval.checkpoint", "", "checkpoint for eval / heatmaps (default: <out>/checkpoint.bin)"},
      {"heatmaps.images", "64", "test images averaged per heatmap"},
  };
  return keys;
}

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Up to `limit` registered keys closest to `key` by edit distance.
inline std::vector<std::string> nearest_keys(std::string_view key, std::size_t limit = 3) {
  std::vector<std::pair<std::size_t, std::string>> scored;
  for (const auto& k : config_registry()) scored.emplace_back(edit_distance(key, k.name), k.name);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(limit, scored.size()); ++i) out.push_back(scored[i].second);
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto piece = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!piece.empty()) out.push_back(piece);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_registry()) values_[k.name] = k.default_value;
  }

  static bool is_key(const std::string& key) {
    return std::any_of(config_registry().begin(), config_registry().end(),
                       [&key](const ConfigKey& k) { return key == k.name; });
  }

  void set(const std::string& key, const std::string& value, const std::string& origin = "override") {
    if (!is_key(key)) {
      std::string msg = "unknown config key '" + key + "' (" + origin + "); nearest valid keys:";
      for (const auto& k : nearest_keys(key)) msg += " " + k;
      throw ConfigError(msg);
    }
    values_[key] = value;
  }

  /// Parses one `key=value` assignment.
  void apply_override(const std::string& assignment, const std::string& origin = "--set") {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "' (" + origin + ")");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)), origin);
  }

  void load_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      apply_override(line, origin + ":" + std::to_string(lineno));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    load_text(ss.str(), path);
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    const auto& v = get(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
  }

  long long get_int(const std::string& key) const {
    const auto& v = get(key);
    try {
      std::size_t used = 0;
      const long long x = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
  }

  std::size_t get_size(const std::string& key) const {
    const long long x = get_int(key);
    if (x < 0) throw ConfigError(key + ": expected a non-negative integer, got " + std::to_string(x));
    return static_cast<std::size_t>(x);
  }

  bool get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
  }

  bool is_auto(const std::string& key) const { return get(key) == "auto"; }

  std::vector<double> get_doubles(const std::string& key) const {
    std::vector<double> out;
    for (const auto& piece : split_list(get(key))) {
      try {
        out.push_back(std::stod(piece));
      } catch (const std::exception&) {
        throw ConfigError(key + ": expected a comma-separated number list, got '" + get(key) + "'");
      }
    }
    return out;
  }

  /// Seed for `seed.<name>`: explicit value, or derived from seed.base.
  std::uint64_t seed(const std::string& name) const {
    const std::string key = "seed." + name;
    if (!is_auto(key)) return static_cast<std::uint64_t>(get_int(key));
    const auto base = static_cast<std::uint64_t>(get_int("seed.base"));
    return mix_seed(base, fnv1a(name));
  }

  /// Sorted `key = value` lines covering every key.
  std::string snapshot() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  std::uint64_t fingerprint() const { return fnv1a(snapshot()); }

  /// Hash of the resolved seeds and precision.
  std::uint64_t seed_fingerprint() const {
    std::string s;
    for (const char* name : {"data", "init", "dropout", "eval"}) s += std::to_string(seed(name)) + ";";
    s += get("lcd.seed") + ";" + get("run.precision");
    return fnv1a(s);
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace occludrop
