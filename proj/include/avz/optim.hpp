#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "avz/errors.hpp"
#include "avz/params.hpp"

namespace avz {

enum class OptimizerMethod { sgd, adam };

inline OptimizerMethod optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerMethod::sgd;
  if (s == "adam") return OptimizerMethod::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}
inline const char* to_string(OptimizerMethod m) { return m == OptimizerMethod::sgd ? "sgd" : "adam"; }

struct OptimizerConfig {
  OptimizerMethod method = OptimizerMethod::adam;
  double base_lr = 1e-3;
  double decay_rate = 0.5;
  std::int64_t decay_steps = 5000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(decay_rate > 0.0 && decay_rate <= 1.0)) throw ConfigError("decay rate must lie in (0, 1]");
    if (decay_steps <= 0) throw ConfigError("decay steps must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  }
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// base_lr * decay_rate^(step / decay_steps), continuous exponent.
inline double lr_schedule(std::int64_t step, const OptimizerConfig& cfg) {
  if (step < 0) throw std::invalid_argument("negative step");
  return cfg.base_lr *
         std::pow(cfg.decay_rate, static_cast<double>(step) / static_cast<double>(cfg.decay_steps));
}

/// theta <- theta - lr * grad
template <typename T>
void sgd_step(ParameterSet<T>& params, const GradientSet<T>& grads, double lr) {
  require_aligned(params, grads);
  const T g = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& d = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= g * d[j];
  }
}

/// First and second moment estimates, aligned with the parameters.
template <typename T>
struct AdamState {
  GradientSet<T> m;
  GradientSet<T> v;
  AdamState() = default;
  explicit AdamState(const ParameterSet<T>& like) : m(like), v(like) {}
};

/// One bias-corrected Adam update at step t >= 1:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
void adam_step(ParameterSet<T>& params, const GradientSet<T>& grads, AdamState<T>& state,
               std::int64_t t, double lr, const OptimizerConfig& cfg) {
  if (t < 1) throw std::invalid_argument("adam step counter must start at 1");
  require_aligned(params, grads);
  require_aligned(params, state.m);
  require_aligned(params, state.v);
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& g = grads[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] -= static_cast<T>(lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.epsilon));
    }
  }
}

}  // namespace avz
