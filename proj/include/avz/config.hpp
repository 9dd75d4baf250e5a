#pragma once

// Run configuration as a key=value text file.
//
//   # comment
//   seed = 7
//   train.batch_size = 15
//   model.channels = 8,16,32,64
//
// Every key is optional; missing keys keep their defaults. Unknown keys,
// repeated keys and unparsable values are ConfigErrors naming the key.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "avz/errors.hpp"
#include "avz/model.hpp"
#include "avz/synth.hpp"
#include "avz/training.hpp"

namespace avz {

struct RunConfig {
  /// Master seed: drives the synthetic data and the training run.
  std::uint64_t seed = 1;
  SynthConfig synth;
  std::size_t regions = 4;
  double validation_fraction = 0.25;
  ModelConfig model;
  TrainConfig train;

  /// Copies the master seed into the sub-configurations and validates them.
  void resolve() {
    synth.seed = seed;
    train.seed = seed;
    synth.validate();
    model.validate();
    train.validate();
    if (regions < 2) throw ConfigError("regions must be at least 2");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
      throw ConfigError("validation_fraction must lie in [0, 1)");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline ConfigError bad_value(const std::string& key, const std::string& value, const char* expected) {
  return ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

template <typename U>
U parse_unsigned(const std::string& key, const std::string& v) {
  U out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw bad_value(key, v, "a non-negative integer");
  return out;
}

inline std::int64_t parse_signed(const std::string& key, const std::string& v) {
  std::int64_t out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw bad_value(key, v, "an integer");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(out)) throw bad_value(key, v, "a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw bad_value(key, v, "true or false");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename V>
std::string join(const std::vector<V>& xs, const std::function<std::string(const V&)>& f) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + f(xs[i]);
  return s;
}

struct Binding {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

/// Key table over one RunConfig, in the order the resolved file lists them.
inline std::vector<std::pair<std::string, Binding>> bindings(RunConfig& c) {
  std::vector<std::pair<std::string, Binding>> b;
  auto size = [&](std::string key, std::size_t& f) {
    b.push_back({key, {[&f, key](const std::string& v) { f = parse_unsigned<std::size_t>(key, v); },
                       [&f] { return std::to_string(f); }}});
  };
  auto u64 = [&](std::string key, std::uint64_t& f) {
    b.push_back({key, {[&f, key](const std::string& v) { f = parse_unsigned<std::uint64_t>(key, v); },
                       [&f] { return std::to_string(f); }}});
  };
  auto i64 = [&](std::string key, std::int64_t& f) {
    b.push_back({key, {[&f, key](const std::string& v) { f = parse_signed(key, v); },
                       [&f] { return std::to_string(f); }}});
  };
  auto real = [&](std::string key, double& f) {
    b.push_back({key, {[&f, key](const std::string& v) { f = parse_real(key, v); },
                       [&f] { return format_number(f); }}});
  };
  auto flag = [&](std::string key, bool& f) {
    b.push_back({key, {[&f, key](const std::string& v) { f = parse_bool(key, v); },
                       [&f] { return std::string(f ? "true" : "false"); }}});
  };
  auto sizes = [&](std::string key, std::vector<std::size_t>& f) {
    b.push_back({key, {[&f, key](const std::string& v) {
                         f.clear();
                         for (const auto& s : split_list(v)) f.push_back(parse_unsigned<std::size_t>(key, s));
                       },
                       [&f] {
                         return join<std::size_t>(f, [](const std::size_t& x) { return std::to_string(x); });
                       }}});
  };

  u64("seed", c.seed);

  size("synth.grid_size", c.synth.grid_size);
  real("synth.cell_size", c.synth.cell_size);
  real("synth.base_elevation", c.synth.base_elevation);
  real("synth.relief", c.synth.relief);
  real("synth.roughness", c.synth.roughness);
  real("synth.snow_base", c.synth.snow_base);
  real("synth.snow_lapse", c.synth.snow_lapse);
  real("synth.snow_noise", c.synth.snow_noise);
  real("synth.release_min_deg", c.synth.release_min_deg);
  real("synth.release_max_deg", c.synth.release_max_deg);
  real("synth.snow_threshold", c.synth.snow_threshold);
  real("synth.alpha_red_deg", c.synth.alpha_red_deg);
  real("synth.alpha_yellow_deg", c.synth.alpha_yellow_deg);
  size("synth.regions", c.regions);
  real("synth.validation_fraction", c.validation_fraction);

  size("viewport.n_viewports", c.model.geometry.n_viewports);
  real("viewport.radial_length", c.model.geometry.radial_length);
  real("viewport.tangential_width", c.model.geometry.tangential_width);
  real("viewport.resolution", c.model.geometry.resolution);
  size("viewport.snow_downscale", c.model.geometry.snow_downscale);

  sizes("model.channels", c.model.channels);
  sizes("model.filter_sizes", c.model.filter_sizes);
  sizes("model.dense_widths", c.model.dense_widths);
  size("model.classes", c.model.classes);
  real("model.dropout_rate", c.model.dropout_rate);
  flag("model.pooling", c.model.pooling);
  size("model.snow_after_layer", c.model.snow_after_layer);
  b.push_back({"model.readout",
               {[&c](const std::string& v) {
                  if (v == "concat") c.model.readout = Readout::concat;
                  else if (v == "average") c.model.readout = Readout::average;
                  else throw bad_value("model.readout", v, "concat or average");
                },
                [&c] { return std::string(c.model.readout == Readout::concat ? "concat" : "average"); }}});

  size("train.batch_size", c.train.batch_size);
  i64("train.max_steps", c.train.max_steps);
  i64("train.eval_interval", c.train.eval_interval);
  flag("train.augment", c.train.augment);
  size("train.eval_samples", c.train.eval_samples);
  size("train.label_stride", c.train.label_stride);
  size("train.queue_capacity", c.train.queue_capacity);
  b.push_back({"train.validation_regions",
               {[&c](const std::string& v) { c.train.validation_regions = split_list(v); },
                [&c] {
                  return join<std::string>(c.train.validation_regions, [](const std::string& s) { return s; });
                }}});

  b.push_back({"optimizer.method",
               {[&c](const std::string& v) {
                  try {
                    c.train.optimizer.method = optimizer_from_string(v);
                  } catch (const ConfigError&) {
                    throw bad_value("optimizer.method", v, "sgd or adam");
                  }
                },
                [&c] { return std::string(to_string(c.train.optimizer.method)); }}});
  real("optimizer.base_lr", c.train.optimizer.base_lr);
  real("optimizer.decay_rate", c.train.optimizer.decay_rate);
  i64("optimizer.decay_steps", c.train.optimizer.decay_steps);
  real("optimizer.beta1", c.train.optimizer.beta1);
  real("optimizer.beta2", c.train.optimizer.beta2);
  real("optimizer.epsilon", c.train.optimizer.epsilon);
  return b;
}

}  // namespace detail

/// Every accepted key, in canonical order.
inline std::vector<std::string> config_keys() {
  RunConfig c;
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::bindings(c)) keys.push_back(k);
  return keys;
}

/// Applies the settings in `text` on top of `base`. Does not resolve.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  auto table = detail::bindings(base);
  std::map<std::string, detail::Binding*> index;
  for (auto& [k, b] : table) index[k] = &b;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " is not key = value");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    const auto it = index.find(key);
    if (it == index.end())
      throw ConfigError("unknown config key '" + key + "' (line " + std::to_string(lineno) + ")");
    if (auto [pos, fresh] = seen.emplace(key, lineno); !fresh)
      throw ConfigError("config key '" + key + "' repeated (lines " + std::to_string(pos->second) + " and " +
                        std::to_string(lineno) + ")");
    it->second->set(value);
  }
  return base;
}

inline RunConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  return parse_config(in);
}

/// Every key with its value; parse_config(format_config(c)) reproduces c.
inline std::string format_config(RunConfig c) {
  std::string s;
  for (const auto& [k, b] : detail::bindings(c)) s += k + " = " + b.get() + "\n";
  return s;
}

inline void write_config(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "# resolved configuration\n" << format_config(c);
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace avz
