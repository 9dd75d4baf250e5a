#pragma once

// Checkpoint container.
//
//   line 1   "AVZCKPT 1"
//   line 2   one-line JSON header: model and optimizer configuration, step,
//            best validation top-1, run metadata, parameter names and shapes
//   rest     little-endian IEEE doubles: every parameter tensor in
//            ParameterSet order, then Adam m, then Adam v (if present)
//
// Values are stored as doubles whatever the model scalar type, so a float
// or double model round-trips exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "avz/errors.hpp"
#include "avz/model.hpp"
#include "avz/optim.hpp"

namespace avz {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr const char* kCheckpointMagic = "AVZCKPT";
inline constexpr int kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  Model<T> model;
  OptimizerConfig optimizer;
  AdamState<T> adam;
  bool has_adam = false;
  std::int64_t step = 0;
  double best_val_top1 = -1.0;
  nlohmann::json meta = nlohmann::json::object();  ///< free-form run metadata
};

inline nlohmann::json to_json(const ViewportGeometry& g) {
  return {{"n_viewports", g.n_viewports},     {"radial_length", g.radial_length},
          {"tangential_width", g.tangential_width}, {"resolution", g.resolution},
          {"snow_downscale", g.snow_downscale}};
}

inline ViewportGeometry geometry_from_json(const nlohmann::json& j) {
  ViewportGeometry g;
  g.n_viewports = j.at("n_viewports").get<std::size_t>();
  g.radial_length = j.at("radial_length").get<double>();
  g.tangential_width = j.at("tangential_width").get<double>();
  g.resolution = j.at("resolution").get<double>();
  g.snow_downscale = j.at("snow_downscale").get<std::size_t>();
  return g;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"geometry", to_json(c.geometry)},
          {"channels", c.channels},
          {"filter_sizes", c.filter_sizes},
          {"dense_widths", c.dense_widths},
          {"classes", c.classes},
          {"dropout_rate", c.dropout_rate},
          {"pooling", c.pooling},
          {"snow_after_layer", c.snow_after_layer},
          {"readout", c.readout == Readout::concat ? "concat" : "average"}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.geometry = geometry_from_json(j.at("geometry"));
  c.channels = j.at("channels").get<std::vector<std::size_t>>();
  c.filter_sizes = j.at("filter_sizes").get<std::vector<std::size_t>>();
  c.dense_widths = j.at("dense_widths").get<std::vector<std::size_t>>();
  c.classes = j.at("classes").get<std::size_t>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.pooling = j.at("pooling").get<bool>();
  c.snow_after_layer = j.at("snow_after_layer").get<std::size_t>();
  const auto r = j.at("readout").get<std::string>();
  if (r != "concat" && r != "average") throw ParseError("unknown readout '" + r + "' in checkpoint");
  c.readout = r == "concat" ? Readout::concat : Readout::average;
  return c;
}

inline nlohmann::json to_json(const OptimizerConfig& o) {
  return {{"method", to_string(o.method)}, {"base_lr", o.base_lr},   {"decay_rate", o.decay_rate},
          {"decay_steps", o.decay_steps},  {"beta1", o.beta1},       {"beta2", o.beta2},
          {"epsilon", o.epsilon}};
}

inline OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
  OptimizerConfig o;
  o.method = optimizer_from_string(j.at("method").get<std::string>());
  o.base_lr = j.at("base_lr").get<double>();
  o.decay_rate = j.at("decay_rate").get<double>();
  o.decay_steps = j.at("decay_steps").get<std::int64_t>();
  o.beta1 = j.at("beta1").get<double>();
  o.beta2 = j.at("beta2").get<double>();
  o.epsilon = j.at("epsilon").get<double>();
  return o;
}

namespace detail {

template <typename T>
void write_doubles(std::ostream& out, const Tensor<T>& t) {
  std::vector<double> buf(t.vec().begin(), t.vec().end());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
}

template <typename T>
void read_doubles(std::istream& in, Tensor<T>& t, const std::string& path) {
  std::vector<double> buf(t.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(double)))
    throw IoError("checkpoint " + path + " is truncated");
  for (std::size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<T>(buf[i]);
}

}  // namespace detail

/// Writes via a temporary file and rename, so a crash never leaves a
/// half-written checkpoint under `path`.
template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::string& path) {
  nlohmann::json h;
  h["model"] = to_json(ck.model.config);
  h["optimizer"] = to_json(ck.optimizer);
  h["step"] = ck.step;
  h["best_val_top1"] = ck.best_val_top1;
  h["has_adam"] = ck.has_adam;
  h["meta"] = ck.meta;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : ck.model.params) params.push_back({{"name", e.name}, {"shape", e.value.shape()}});
  h["params"] = params;

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n' << h.dump() << '\n';
    for (const auto& e : ck.model.params) detail::write_doubles(out, e.value);
    if (ck.has_adam) {
      for (std::size_t i = 0; i < ck.model.params.size(); ++i) detail::write_doubles(out, ck.adam.m[i]);
      for (std::size_t i = 0; i < ck.model.params.size(); ++i) detail::write_doubles(out, ck.adam.v[i]);
    }
    out.flush();
    if (!out) throw IoError("failed writing checkpoint " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != kCheckpointMagic) throw ParseError(path + " is not a checkpoint file");
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint " + path + " has unsupported version " + std::to_string(version));
  in.ignore(1);
  std::string line;
  std::getline(in, line);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path + " header: " + e.what(), 2);
  }

  Checkpoint<T> ck;
  try {
    ck.model.config = model_config_from_json(h.at("model"));
    ck.optimizer = optimizer_from_json(h.at("optimizer"));
    ck.step = h.at("step").get<std::int64_t>();
    ck.best_val_top1 = h.at("best_val_top1").get<double>();
    ck.has_adam = h.at("has_adam").get<bool>();
    ck.meta = h.value("meta", nlohmann::json::object());
    for (const auto& p : h.at("params"))
      ck.model.params.add(p.at("name").get<std::string>(), Tensor<T>(p.at("shape").get<Shape>()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path + " header: " + e.what(), 2);
  }
  ck.model.config.validate();
  for (auto& e : ck.model.params) detail::read_doubles(in, e.value, path);
  if (ck.has_adam) {
    ck.adam = AdamState<T>(ck.model.params);
    for (std::size_t i = 0; i < ck.model.params.size(); ++i) detail::read_doubles(in, ck.adam.m[i], path);
    for (std::size_t i = 0; i < ck.model.params.size(); ++i) detail::read_doubles(in, ck.adam.v[i], path);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint " + path + " has trailing data");

  // The stored layout must be what this configuration would build.
  const auto fresh = init_model<T>(ck.model.config, 0);
  require_shape(fresh.params.size() == ck.model.params.size(), "checkpoint parameter count does not match its config");
  for (std::size_t i = 0; i < fresh.params.size(); ++i)
    require_shape(fresh.params.name(i) == ck.model.params.name(i) &&
                      fresh.params[i].shape() == ck.model.params[i].shape(),
                  "checkpoint parameter '" + ck.model.params.name(i) + "' does not match its config");
  return ck;
}

}  // namespace avz
