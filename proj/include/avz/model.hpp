#pragma once

// The rotation-invariant hazard classifier.
//
// One convolutional sub-network is applied, with a single shared parameter
// set, to every viewport of a stack:
//
//   terrain patch (1 map) -> conv1 -> relu -> pool -> conv2 -> relu -> pool
//     -> conv3 -> relu -> pool -> (+ snow patch as an extra map)
//     -> conv4 -> relu -> pool -> flatten -> dense1 -> relu -> dropout
//     -> dense2 -> relu -> dropout -> logits (3)
//
// The per-viewport logit triples are concatenated in viewport order and fed
// to a dense readout layer whose softmax gives (green, yellow, red)
// probabilities. All viewports travel through the sub-network together as
// lanes of one tensor.

#include <array>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "avz/errors.hpp"
#include "avz/kernels.hpp"
#include "avz/params.hpp"
#include "avz/raster.hpp"
#include "avz/tape.hpp"
#include "avz/viewport.hpp"

namespace avz {

enum class Readout {
  concat,   ///< dense layer over all viewport logits
  average,  ///< mean of the viewport logits; no parameters, order independent
};

struct ModelConfig {
  ViewportGeometry geometry;
  std::vector<std::size_t> channels = {8, 16, 32, 64};
  std::vector<std::size_t> filter_sizes = {5, 5, 3, 3};
  std::vector<std::size_t> dense_widths = {512, 512};
  std::size_t classes = 3;
  double dropout_rate = 0.5;
  bool pooling = true;
  /// Snow joins after this many conv blocks (1-based).
  std::size_t snow_after_layer = 3;
  Readout readout = Readout::concat;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  void validate() const {
    geometry.validate();
    if (channels.empty() || channels.size() != filter_sizes.size())
      throw ConfigError("conv channel plan and filter sizes must have the same nonzero length");
    for (auto k : filter_sizes)
      if (k == 0 || k % 2 == 0) throw ConfigError("filter sizes must be odd");
    if (snow_after_layer == 0 || snow_after_layer >= channels.size())
      throw ConfigError("snow must join between two conv layers");
    if (classes != kNumClasses) throw ConfigError("the model predicts exactly three classes");
    check_dropout_rate(dropout_rate);
    (void)trace();
  }

  struct Stage {
    std::string name;
    std::size_t maps, rows, cols;
  };

  /// Shapes after every stage for one viewport. Throws ConfigError when the
  /// maps shrink below a filter or the snow patch cannot be cropped to the
  /// maps it joins.
  std::vector<Stage> trace() const {
    std::vector<Stage> st;
    std::size_t m = 1, h = geometry.radial_px(), w = geometry.tangential_px();
    st.push_back({"input", m, h, w});
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const std::size_t k = filter_sizes[i];
      if (h < k || w < k)
        throw ConfigError("conv" + std::to_string(i + 1) + " filter " + std::to_string(k) +
                          " exceeds its " + std::to_string(h) + "x" + std::to_string(w) + " input");
      if (i == snow_after_layer) {
        const std::size_t sh = geometry.snow_radial_px(), sw = geometry.snow_tangential_px();
        if (sh < h || sw < w)
          throw ConfigError("snow patch " + std::to_string(sh) + "x" + std::to_string(sw) +
                            " cannot be cropped to the " + std::to_string(h) + "x" +
                            std::to_string(w) + " maps it joins");
        m += 1;
        st.push_back({"snow", m, h, w});
      }
      h = h - k + 1, w = w - k + 1, m = channels[i];
      st.push_back({"conv" + std::to_string(i + 1), m, h, w});
      if (pooling) {
        if (h < 2 || w < 2) throw ConfigError("pooling after conv" + std::to_string(i + 1) + " on maps below 2x2");
        h /= 2, w /= 2;
        st.push_back({"pool" + std::to_string(i + 1), m, h, w});
      }
    }
    st.push_back({"flatten", m * h * w, 1, 1});
    return st;
  }

  std::size_t flat_features() const { return trace().back().maps; }
};

template <typename T>
struct Model {
  ModelConfig config;
  ParameterSet<T> params;
};

/// Weights ~ N(0, gain / fan_in), biases zero, in a fixed parameter order.
/// gain is 2 for relu layers and 1 for the identity-activated logit layer;
/// the readout starts at gain 0.1 so the initial prediction is close to
/// uniform.
template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> m{cfg, {}};
  std::mt19937_64 rng(seed);
  auto he = [&](Shape s, std::size_t fan_in, double gain = 2.0) {
    Tensor<T> t(std::move(s));
    std::normal_distribution<double> n(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
    for (auto& v : t.vec()) v = static_cast<T>(n(rng));
    return t;
  };
  std::size_t in_maps = 1;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    if (i == cfg.snow_after_layer) in_maps += 1;
    const std::size_t k = cfg.filter_sizes[i], out = cfg.channels[i];
    const std::string n = "conv" + std::to_string(i + 1);
    m.params.add(n + ".w", he({out, in_maps, k, k}, in_maps * k * k));
    m.params.add(n + ".b", Tensor<T>({out}));
    in_maps = out;
  }
  std::size_t in = cfg.flat_features();
  for (std::size_t i = 0; i < cfg.dense_widths.size(); ++i) {
    const std::string n = "dense" + std::to_string(i + 1);
    m.params.add(n + ".w", he({cfg.dense_widths[i], in}, in));
    m.params.add(n + ".b", Tensor<T>({cfg.dense_widths[i]}));
    in = cfg.dense_widths[i];
  }
  m.params.add("logits.w", he({cfg.classes, in}, in, 1.0));
  m.params.add("logits.b", Tensor<T>({cfg.classes}));
  const std::size_t rin = cfg.classes * cfg.geometry.n_viewports;
  m.params.add("readout.w", he({cfg.classes, rin}, rin, 0.1));
  m.params.add("readout.b", Tensor<T>({cfg.classes}));
  return m;
}

// ---------------------------------------------------------------------------
// Input packing

/// n x R x C patches -> 1 x R x C x n lanes tensor.
template <typename T>
Tensor<T> patches_to_lanes(const Tensor<double>& patches) {
  const std::size_t n = patches.dim(0), R = patches.dim(1), C = patches.dim(2);
  Tensor<T> y({1, R, C, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t rc = 0; rc < R * C; ++rc) y[rc * n + i] = static_cast<T>(patches[i * R * C + rc]);
  return y;
}

/// Centre crop of the spatial axes of a 1 x R x C x n lanes tensor.
template <typename T>
Tensor<T> center_crop(const Tensor<T>& x, std::size_t rows, std::size_t cols) {
  const std::size_t R = x.dim(1), C = x.dim(2), n = x.dim(3);
  if (rows > R || cols > C)
    throw ConfigError("cannot crop " + std::to_string(R) + "x" + std::to_string(C) + " to " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  const std::size_t r0 = (R - rows) / 2, c0 = (C - cols) / 2;
  Tensor<T> y({1, rows, cols, n});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data() + ((r0 + r) * C + c0) * n, cols * n, y.data() + r * cols * n);
  return y;
}

// ---------------------------------------------------------------------------
// Forward passes

/// Sub-network over a lanes batch. terrain is 1 x R x C x n, snow is
/// 1 x SR x SC x n (uncropped). Returns classes x n logits.
template <typename T, typename Rng>
Var<T> subnet_logits(Tape<T>& tape, const ModelConfig& cfg, const Tensor<T>& terrain,
                     const Tensor<T>& snow, Mode mode, Rng& rng) {
  const std::size_t lanes = terrain.dim(3);
  require_shape(snow.rank() == 4 && snow.dim(3) == lanes, "snow lanes do not match terrain lanes");
  Var<T> h = tape.constant(terrain);
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    if (i == cfg.snow_after_layer) {
      const auto& hv = h.value();
      Var<T> s = tape.constant(center_crop(snow, hv.dim(1), hv.dim(2)));
      h = ops::concat_maps(h, s);
    }
    const std::string n = "conv" + std::to_string(i + 1);
    h = ops::relu(ops::conv2d(h, tape.parameter(n + ".w"), tape.parameter(n + ".b")));
    if (cfg.pooling) h = ops::maxpool2(h);
  }
  h = ops::reshape(h, {h.value().size() / lanes, lanes});
  for (std::size_t i = 0; i < cfg.dense_widths.size(); ++i) {
    const std::string n = "dense" + std::to_string(i + 1);
    h = ops::relu(ops::dense(h, tape.parameter(n + ".w"), tape.parameter(n + ".b")));
    h = ops::dropout(h, cfg.dropout_rate, mode, rng);
  }
  return ops::dense(h, tape.parameter("logits.w"), tape.parameter("logits.b"));
}

/// Logits of one viewport: terrain R x C, snow SR x SC.
template <typename T, typename Rng>
Tensor<T> subnet_forward(const Model<T>& model, const Tensor<double>& terrain_patch,
                         const Tensor<double>& snow_patch, Mode mode, Rng& rng) {
  const auto& g = model.config.geometry;
  require_shape(terrain_patch.shape() == Shape{g.radial_px(), g.tangential_px()},
                "terrain patch must be " + std::to_string(g.radial_px()) + "x" +
                    std::to_string(g.tangential_px()) + ", got " + shape_string(terrain_patch.shape()));
  require_shape(snow_patch.shape() == Shape{g.snow_radial_px(), g.snow_tangential_px()},
                "snow patch must be " + std::to_string(g.snow_radial_px()) + "x" +
                    std::to_string(g.snow_tangential_px()) + ", got " + shape_string(snow_patch.shape()));
  Tape<T> tape(model.params);
  auto t = patches_to_lanes<T>(terrain_patch.reshaped({1, g.radial_px(), g.tangential_px()}));
  auto s = patches_to_lanes<T>(snow_patch.reshaped({1, g.snow_radial_px(), g.snow_tangential_px()}));
  auto out = subnet_logits(tape, model.config, t, s, mode, rng);
  return out.value().reshaped({model.config.classes});
}

template <typename T>
void require_stack_matches(const ModelConfig& cfg, const ViewportStack& stack) {
  const auto& g = cfg.geometry;
  if (stack.terrain.shape() != Shape{g.n_viewports, g.radial_px(), g.tangential_px()} ||
      stack.snow.shape() != Shape{g.n_viewports, g.snow_radial_px(), g.snow_tangential_px()})
    throw GeometryError("viewport stack " + shape_string(stack.terrain.shape()) + "/" +
                        shape_string(stack.snow.shape()) + " does not match the model geometry");
}

/// Records the full model on `tape` and returns the probability node.
template <typename T, typename Rng>
Var<T> model_probabilities(Tape<T>& tape, const ModelConfig& cfg, const ViewportStack& stack,
                           Mode mode, Rng& rng, Var<T>* subnet_out = nullptr) {
  require_stack_matches<T>(cfg, stack);
  auto terrain = patches_to_lanes<T>(stack.terrain);
  auto snow = patches_to_lanes<T>(stack.snow);
  Var<T> logits = subnet_logits(tape, cfg, terrain, snow, mode, rng);
  if (subnet_out) *subnet_out = logits;
  Var<T> merged;
  if (cfg.readout == Readout::average) {
    merged = ops::mean_lanes(logits);
  } else {
    merged = ops::dense(ops::lanes_to_vector(logits), tape.parameter("readout.w"),
                        tape.parameter("readout.b"));
  }
  return ops::softmax(merged);
}

/// Probability triple (green, yellow, red).
struct HazardPrediction {
  std::array<double, kNumClasses> p{};
  HazardClass argmax() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < kNumClasses; ++i)
      if (p[i] > p[best]) best = i;
    return hazard_from_index(best);
  }
};

template <typename T>
HazardPrediction to_prediction(const Tensor<T>& probs) {
  HazardPrediction h;
  for (std::size_t i = 0; i < kNumClasses; ++i) h.p[i] = static_cast<double>(probs[i]);
  return h;
}

template <typename T, typename Rng>
HazardPrediction model_forward(const Model<T>& model, const ViewportStack& stack, Mode mode, Rng& rng) {
  Tape<T> tape(model.params);
  return to_prediction(model_probabilities(tape, model.config, stack, mode, rng).value());
}

/// Evaluation-mode forward pass (no randomness involved).
template <typename T>
HazardPrediction model_forward(const Model<T>& model, const ViewportStack& stack) {
  std::mt19937_64 unused(0);
  return model_forward(model, stack, Mode::eval, unused);
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParameterSummary {
  std::vector<std::pair<std::string, std::size_t>> layers;  ///< in parameter order
  std::size_t total = 0;
  std::size_t dense = 0;  ///< fully connected layers (dense*, logits, readout)
};

/// Counts per layer, where a layer is the name prefix before the first '.'.
template <typename T>
ParameterSummary parameter_summary(const ParameterSet<T>& params) {
  ParameterSummary s;
  for (const auto& e : params) {
    const std::string layer = e.name.substr(0, e.name.find('.'));
    if (s.layers.empty() || s.layers.back().first != layer) s.layers.emplace_back(layer, 0);
    s.layers.back().second += e.value.size();
    s.total += e.value.size();
    if (e.value.rank() <= 2 && layer.rfind("conv", 0) != 0) s.dense += e.value.size();
  }
  return s;
}

}  // namespace avz
