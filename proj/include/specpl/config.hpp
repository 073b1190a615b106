#pragma once

// Line-oriented `key = value` run configuration. Every key has a default and
// unknown keys are rejected.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "specpl/errors.hpp"
#include "specpl/spectral_diag.hpp"
#include "specpl/teacher.hpp"
#include "specpl/trainer.hpp"

namespace specpl {

struct RunConfig {
  SyntheticSpec data;
  TrainConfig train;
  DiagnosticParams diag;
  std::size_t shots = 16;
  std::size_t val_per_class = 4;
  std::size_t test_per_class = 32;
  bool select_by_val = false;
  std::string cache;  // empty: generate from the data keys
  std::string checkpoint = "specpl.ckpt";
  std::string report = "report.tsv";
  std::string history = "history.tsv";

  RunConfig() { data.seed = 7; }

  /// Samples per class the protocol needs from the generator.
  std::size_t samples_per_class() const {
    return shots + (select_by_val ? val_per_class : 0) + test_per_class;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  std::from_chars_result r{};
  if constexpr (std::is_floating_point_v<T>) {
    r = std::from_chars(first, last, value, std::chars_format::general);
  } else {
    r = std::from_chars(first, last, value);
  }
  if (r.ec != std::errc() || r.ptr != last) {
    throw UsageError("invalid value '" + text + "' for key '" + key + "'");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw UsageError("invalid boolean '" + text + "' for key '" + key + "'");
}

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::vector<ConfigKey> config_keys() {
  std::vector<ConfigKey> keys;
  auto size_key = [&](std::string name, auto getter) {
    keys.push_back(ConfigKey{
        name,
        [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_number<std::size_t>(name, v); },
        [getter](const RunConfig& c) { return std::to_string(getter(c)); }});
  };
  auto u64_key = [&](std::string name, auto getter) {
    keys.push_back(ConfigKey{
        name,
        [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_number<std::uint64_t>(name, v); },
        [getter](const RunConfig& c) { return std::to_string(getter(c)); }});
  };
  auto real_key = [&](std::string name, auto getter) {
    keys.push_back(ConfigKey{
        name, [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_number<double>(name, v); },
        [getter](const RunConfig& c) { return format_double(getter(c)); }});
  };
  auto bool_key = [&](std::string name, auto getter) {
    keys.push_back(ConfigKey{
        name, [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_bool(name, v); },
        [getter](const RunConfig& c) { return std::string(getter(c) ? "true" : "false"); }});
  };
  auto string_key = [&](std::string name, auto getter) {
    keys.push_back(ConfigKey{name, [getter](RunConfig& c, const std::string& v) { getter(c) = v; },
                             [getter](const RunConfig& c) { return getter(c); }});
  };

  u64_key("seed", [](auto& c) -> auto& { return c.train.seed; });
  u64_key("data_seed", [](auto& c) -> auto& { return c.data.seed; });
  size_key("num_classes", [](auto& c) -> auto& { return c.data.num_classes; });
  size_key("base_modes", [](auto& c) -> auto& { return c.data.base_modes; });
  size_key("detail_modes", [](auto& c) -> auto& { return c.data.detail_modes; });
  real_key("noise_std", [](auto& c) -> auto& { return c.data.noise_std; });
  keys.push_back(ConfigKey{
      "identity_band",
      [](RunConfig& c, const std::string& v) {
        if (v == "low") c.data.identity_band = Band::low;
        else if (v == "high") c.data.identity_band = Band::high;
        else throw UsageError("invalid value '" + v + "' for key 'identity_band'");
      },
      [](const RunConfig& c) { return std::string(to_string(c.data.identity_band)); }});
  size_key("channels", [](auto& c) -> auto& { return c.data.grid.channels; });
  size_key("height", [](auto& c) -> auto& { return c.data.grid.height; });
  size_key("width", [](auto& c) -> auto& { return c.data.grid.width; });
  size_key("shots", [](auto& c) -> auto& { return c.shots; });
  size_key("val_per_class", [](auto& c) -> auto& { return c.val_per_class; });
  size_key("test_per_class", [](auto& c) -> auto& { return c.test_per_class; });
  bool_key("select_by_val", [](auto& c) -> auto& { return c.select_by_val; });
  size_key("embed_dim", [](auto& c) -> auto& { return c.train.embed_dim; });
  size_key("k", [](auto& c) -> auto& { return c.train.kernel; });
  real_key("lambda_sem", [](auto& c) -> auto& { return c.train.weights.sem; });
  real_key("lambda_gf", [](auto& c) -> auto& { return c.train.weights.granule_f; });
  real_key("lambda_gcf", [](auto& c) -> auto& { return c.train.weights.granule_cf; });
  size_key("bank_size", [](auto& c) -> auto& { return c.train.bank_size; });
  real_key("tau", [](auto& c) -> auto& { return c.train.tau; });
  real_key("momentum", [](auto& c) -> auto& { return c.train.momentum; });
  real_key("eta", [](auto& c) -> auto& { return c.train.eta; });
  real_key("logit_scale", [](auto& c) -> auto& { return c.train.logit_scale; });
  size_key("epochs", [](auto& c) -> auto& { return c.train.epochs; });
  size_key("batch_size", [](auto& c) -> auto& { return c.train.batch_size; });
  real_key("learning_rate", [](auto& c) -> auto& { return c.train.learning_rate; });
  bool_key("use_bank", [](auto& c) -> auto& { return c.train.use_bank; });
  bool_key("use_sem", [](auto& c) -> auto& { return c.train.use_sem; });
  bool_key("use_gf", [](auto& c) -> auto& { return c.train.use_gf; });
  bool_key("use_gcf", [](auto& c) -> auto& { return c.train.use_gcf; });
  keys.push_back(ConfigKey{
      "anchor",
      [](RunConfig& c, const std::string& v) {
        if (v == "raw_text_by_label") c.train.anchor = SharedAnchorPolicy::raw_text_by_label;
        else if (v == "refined_text_by_label") c.train.anchor = SharedAnchorPolicy::refined_text_by_label;
        else if (v == "image_embedding") c.train.anchor = SharedAnchorPolicy::image_embedding;
        else throw UsageError("invalid value '" + v + "' for key 'anchor'");
      },
      [](const RunConfig& c) { return std::string(to_string(c.train.anchor)); }});
  bool_key("refresh", [](auto& c) -> auto& { return c.train.refresh; });
  real_key("refresh_fraction", [](auto& c) -> auto& { return c.train.refresh_fraction; });
  real_key("text_init_noise", [](auto& c) -> auto& { return c.train.text_init_noise; });
  size_key("diag_k", [](auto& c) -> auto& { return c.diag.kernel; });
  size_key("diag_bands", [](auto& c) -> auto& { return c.diag.bands; });
  keys.push_back(ConfigKey{
      "diag_grid",
      [](RunConfig& c, const std::string& v) {
        c.diag.height = c.diag.width = parse_number<std::size_t>("diag_grid", v);
      },
      [](const RunConfig& c) { return std::to_string(c.diag.height); }});
  string_key("cache", [](auto& c) -> auto& { return c.cache; });
  string_key("checkpoint", [](auto& c) -> auto& { return c.checkpoint; });
  string_key("report", [](auto& c) -> auto& { return c.report; });
  string_key("history", [](auto& c) -> auto& { return c.history; });
  return keys;
}

}  // namespace detail

/// Sets one key; throws UsageError naming the key when it is unknown.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw UsageError("unknown configuration key '" + key + "'");
}

/// Applies a "key=value" override.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("expected key=value, got '" + assignment + "'");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Parses `key = value` lines; blank lines and '#' comments are ignored.
inline void parse_config(RunConfig& cfg, std::istream& in) {
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    apply_override(cfg, line);
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open config");
  RunConfig cfg;
  parse_config(cfg, in);
  return cfg;
}

/// SPECPL_SEED, when set, replaces the training seed.
inline void apply_environment(RunConfig& cfg) {
  if (const char* env = std::getenv("SPECPL_SEED"); env && *env) {
    cfg.train.seed = detail::parse_number<std::uint64_t>("SPECPL_SEED", env);
  }
}

/// All keys in canonical order as `key = value` lines.
inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

/// "# resolved-config" block: every line of format_config prefixed by "# ".
inline std::string resolved_config_header(const RunConfig& cfg) {
  std::string out = "# resolved-config\n";
  std::istringstream lines(format_config(cfg));
  std::string line;
  while (std::getline(lines, line)) out += "# " + line + "\n";
  out += "# end-config\n";
  return out;
}

/// Reads a resolved-config block back. Stops after "# end-config".
inline RunConfig parse_resolved_header(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "# resolved-config") {
    throw FormatError("missing '# resolved-config' header");
  }
  RunConfig cfg;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (line == "# end-config") return cfg;
    if (line.rfind("# ", 0) != 0) throw FormatError("malformed config line: " + line);
    apply_override(cfg, line.substr(2));
  }
  throw FormatError("unterminated resolved-config block");
}

}  // namespace specpl
