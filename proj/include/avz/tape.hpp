#pragma once

// Reverse-mode differentiation over the layer kernels.
//
// A Tape records every operation of a forward pass as a node holding its
// output value and a closure that maps the node's output gradient to input
// gradients. backward() seeds the scalar loss with 1 and visits nodes in
// reverse recording order. Parameters enter the tape by reference, so one
// parameter node used by several operations (shared weights) accumulates
// all of their contributions.

#include <deque>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "avz/kernels.hpp"
#include "avz/params.hpp"
#include "avz/tensor.hpp"

namespace avz {

/// Raised when backward() is asked for a loss that is not part of the tape.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;
  const Tensor<T>& value() const;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(const Tensor<T>& dy)>;

  Tape() = default;
  explicit Tape(const ParameterSet<T>& params) : params_(&params), param_nodes_(params.size(), kNone) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(Node{std::move(v), nullptr, {}, false, nullptr, kNone}); }

  /// Node for parameter `index` of the bound ParameterSet; repeated calls
  /// return the same node.
  Var<T> parameter(std::size_t index) {
    if (!params_) throw GraphError("tape has no parameter set bound");
    if (index >= params_->size()) throw std::out_of_range("parameter index out of range");
    if (param_nodes_[index] == kNone)
      param_nodes_[index] = push(Node{{}, &(*params_)[index], {}, true, nullptr, index}).id;
    return {this, param_nodes_[index]};
  }
  Var<T> parameter(const std::string& name) { return parameter(params_->index_of(name)); }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).get(); }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated on first use.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.get().shape());
    return n.grad;
  }
  /// Null when the node does not need a gradient.
  Tensor<T>* grad_if_needed(Var<T> v) { return nodes_[v.id].requires_grad ? &grad(v.id) : nullptr; }

  Var<T> record(Tensor<T> value, bool requires_grad, Backward fn) {
    return push(Node{std::move(value), nullptr, {}, requires_grad, requires_grad ? std::move(fn) : nullptr, kNone});
  }

  /// dL/dtheta for every parameter of the bound set (zeros for unused ones).
  GradientSet<T> backward(Var<T> loss) {
    if (!params_) throw GraphError("tape has no parameter set bound");
    GradientSet<T> g(*params_);
    accumulate(loss, g, T{1});
    return g;
  }

  /// into += scale * dL/dtheta.
  void accumulate(Var<T> loss, GradientSet<T>& into, T scale) {
    if (loss.tape != this || loss.id >= nodes_.size())
      throw GraphError("loss does not belong to this tape (detached graph)");
    if (value(loss).size() != 1)
      throw GraphError("backward needs a scalar loss, got shape " + shape_string(value(loss).shape()));
    for (auto& n : nodes_) n.grad = Tensor<T>{};
    grad(loss.id)[0] = T{1};
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward(n.grad);
    }
    if (!params_) return;
    require_shape(into.size() == params_->size(), "gradient set not aligned with parameters");
    for (std::size_t i = 0; i < param_nodes_.size(); ++i) {
      if (param_nodes_[i] == kNone) continue;
      const Tensor<T>& g = nodes_[param_nodes_[i]].grad;
      if (g.empty()) continue;
      Tensor<T>& dst = into[i];
      for (std::size_t j = 0; j < g.size(); ++j) dst[j] += scale * g[j];
    }
  }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  struct Node {
    Tensor<T> own;
    const Tensor<T>* external;
    Tensor<T> grad;
    bool requires_grad;
    Backward backward;
    std::size_t param_index;
    const Tensor<T>& get() const { return external ? *external : own; }
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const ParameterSet<T>* params_ = nullptr;
  std::vector<std::size_t> param_nodes_;
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(*this);
}

namespace ops {

namespace detail {
template <typename T>
Tape<T>& same_tape(std::initializer_list<Var<T>> vs) {
  Tape<T>* t = vs.begin()->tape;
  for (const auto& v : vs)
    if (v.tape != t) throw GraphError("operands recorded on different tapes");
  return *t;
}
template <typename T>
bool any_grad(Tape<T>& t, std::initializer_list<Var<T>> vs) {
  for (const auto& v : vs)
    if (t.requires_grad(v)) return true;
  return false;
}
}  // namespace detail

/// W x + b for x of shape in or in x lanes.
template <typename T>
Var<T> dense(Var<T> x, Var<T> W, Var<T> b) {
  auto& t = detail::same_tape({x, W, b});
  auto y = dense_affine(t.value(x), t.value(W), t.value(b));
  return t.record(std::move(y), detail::any_grad(t, {x, W, b}), [&t, x, W, b](const Tensor<T>& dy) {
    Tensor<T> scratch_w, scratch_b;
    Tensor<T>* gw = t.grad_if_needed(W);
    Tensor<T>* gb = t.grad_if_needed(b);
    if (!gw) scratch_w = Tensor<T>(t.value(W).shape()), gw = &scratch_w;
    if (!gb) scratch_b = Tensor<T>(t.value(b).shape()), gb = &scratch_b;
    dense_affine_backward(t.value(x), t.value(W), dy, t.grad_if_needed(x), *gw, *gb);
  });
}

/// Valid cross-correlation plus bias (no activation).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b) {
  auto& t = detail::same_tape({x, w, b});
  auto y = conv2d_affine(t.value(x), t.value(w), t.value(b));
  return t.record(std::move(y), detail::any_grad(t, {x, w, b}), [&t, x, w, b](const Tensor<T>& dy) {
    Tensor<T> scratch_w, scratch_b;
    Tensor<T>* gw = t.grad_if_needed(w);
    Tensor<T>* gb = t.grad_if_needed(b);
    if (!gw) scratch_w = Tensor<T>(t.value(w).shape()), gw = &scratch_w;
    if (!gb) scratch_b = Tensor<T>(t.value(b).shape()), gb = &scratch_b;
    conv2d_affine_backward(t.value(x), t.value(w), dy, t.grad_if_needed(x), *gw, *gb);
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  auto& t = *x.tape;
  Tensor<T> y = t.value(x);
  for (auto& v : y.vec()) v = v > T{0} ? v : T{0};
  return t.record(std::move(y), t.requires_grad(x), [&t, x](const Tensor<T>& dy) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += xv[i] > T{0} ? dy[i] : T{0};
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  auto& t = *x.tape;
  Tensor<T> y = t.value(x);
  for (auto& v : y.vec()) v = activate(Activation::sigmoid, v);
  Tensor<T> keep = y;
  return t.record(std::move(y), t.requires_grad(x), [&t, x, keep](const Tensor<T>& dy) {
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * keep[i] * (T{1} - keep[i]);
  });
}

template <typename T>
Var<T> activation(Var<T> x, Activation act) {
  switch (act) {
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::identity: return x;
  }
  return x;
}

template <typename T>
Var<T> maxpool2(Var<T> x) {
  auto& t = *x.tape;
  std::vector<std::uint32_t> argmax;
  auto y = avz::maxpool2(t.value(x), &argmax);
  return t.record(std::move(y), t.requires_grad(x),
                  [&t, x, argmax = std::move(argmax)](const Tensor<T>& dy) {
                    maxpool2_backward(argmax, dy, t.grad(x.id));
                  });
}

/// Stacks the maps of a and b (maps x rows x cols [x lanes]) along the map axis.
template <typename T>
Var<T> concat_maps(Var<T> a, Var<T> b) {
  auto& t = detail::same_tape({a, b});
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  require_shape(av.rank() == bv.rank() && av.rank() >= 3, "concat_maps needs map tensors of equal rank");
  for (std::size_t d = 1; d < av.rank(); ++d)
    require_shape(av.dim(d) == bv.dim(d), "concat_maps: map shapes " + shape_string(av.shape()) +
                                              " and " + shape_string(bv.shape()) + " differ");
  Shape s = av.shape();
  s[0] += bv.dim(0);
  Tensor<T> y(s);
  std::copy(av.vec().begin(), av.vec().end(), y.vec().begin());
  std::copy(bv.vec().begin(), bv.vec().end(), y.vec().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t na = av.size();
  return t.record(std::move(y), detail::any_grad(t, {a, b}), [&t, a, b, na](const Tensor<T>& dy) {
    if (auto* ga = t.grad_if_needed(a))
      for (std::size_t i = 0; i < na; ++i) (*ga)[i] += dy[i];
    if (auto* gb = t.grad_if_needed(b))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += dy[na + i];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape s) {
  auto& t = *x.tape;
  auto y = t.value(x).reshaped(std::move(s));
  return t.record(std::move(y), t.requires_grad(x), [&t, x](const Tensor<T>& dy) {
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

/// features x lanes -> flat vector ordered lane-major (lane 0's features
/// first).
template <typename T>
Var<T> lanes_to_vector(Var<T> x) {
  auto& t = *x.tape;
  const auto& xv = t.value(x);
  require_shape(xv.rank() == 2, "lanes_to_vector needs features x lanes");
  const std::size_t F = xv.dim(0), P = xv.dim(1);
  Tensor<T> y({F * P});
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t p = 0; p < P; ++p) y[p * F + f] = xv[f * P + p];
  return t.record(std::move(y), t.requires_grad(x), [&t, x, F, P](const Tensor<T>& dy) {
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t p = 0; p < P; ++p) dx[f * P + p] += dy[p * F + f];
  });
}

/// Mean over lanes of a features x lanes tensor.
template <typename T>
Var<T> mean_lanes(Var<T> x) {
  auto& t = *x.tape;
  const auto& xv = t.value(x);
  require_shape(xv.rank() == 2, "mean_lanes needs features x lanes");
  const std::size_t F = xv.dim(0), P = xv.dim(1);
  Tensor<T> y({F});
  for (std::size_t f = 0; f < F; ++f) {
    T s = T{0};
    for (std::size_t p = 0; p < P; ++p) s += xv[f * P + p];
    y[f] = s / static_cast<T>(P);
  }
  return t.record(std::move(y), t.requires_grad(x), [&t, x, F, P](const Tensor<T>& dy) {
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t p = 0; p < P; ++p) dx[f * P + p] += dy[f] / static_cast<T>(P);
  });
}

/// Inverted dropout; the mask drawn here is replayed by the backward pass.
template <typename T, typename Rng>
Var<T> dropout(Var<T> x, double rate, Mode mode, Rng& rng) {
  check_dropout_rate(rate);
  if (mode == Mode::eval || rate == 0.0) return x;
  auto& t = *x.tape;
  auto mask = dropout_mask<T>(t.value(x).size(), rate, rng);
  Tensor<T> y = t.value(x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return t.record(std::move(y), t.requires_grad(x), [&t, x, mask = std::move(mask)](const Tensor<T>& dy) {
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
  });
}

template <typename T>
Var<T> softmax(Var<T> z) {
  auto& t = *z.tape;
  auto p = avz::softmax(t.value(z));
  Tensor<T> keep = p;
  return t.record(std::move(p), t.requires_grad(z), [&t, z, keep](const Tensor<T>& dp) {
    auto dz = softmax_backward(keep, dp);
    Tensor<T>& g = t.grad(z.id);
    for (std::size_t i = 0; i < dz.size(); ++i) g[i] += dz[i];
  });
}

/// Scalar cross entropy of probabilities p against a fixed target.
template <typename T>
Var<T> cross_entropy(Var<T> p, const Tensor<T>& target) {
  auto& t = *p.tape;
  Tensor<T> y({1});
  y[0] = avz::cross_entropy(t.value(p), target);
  return t.record(std::move(y), t.requires_grad(p), [&t, p, target](const Tensor<T>& dy) {
    auto dp = cross_entropy_backward(t.value(p), target);
    Tensor<T>& g = t.grad(p.id);
    for (std::size_t i = 0; i < dp.size(); ++i) g[i] += dy[0] * dp[i];
  });
}

// Elementwise arithmetic, enough to build small test objectives.

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& t = detail::same_tape({a, b});
  require_shape(t.value(a).shape() == t.value(b).shape(), "add: shapes differ");
  Tensor<T> y = t.value(a);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += t.value(b)[i];
  return t.record(std::move(y), detail::any_grad(t, {a, b}), [&t, a, b](const Tensor<T>& dy) {
    for (Var<T> v : {a, b})
      if (auto* g = t.grad_if_needed(v))
        for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i] += dy[i];
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& t = detail::same_tape({a, b});
  require_shape(t.value(a).shape() == t.value(b).shape(), "mul: shapes differ");
  Tensor<T> y = t.value(a);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= t.value(b)[i];
  return t.record(std::move(y), detail::any_grad(t, {a, b}), [&t, a, b](const Tensor<T>& dy) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    if (auto* ga = t.grad_if_needed(a))
      for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i] * bv[i];
    if (auto* gb = t.grad_if_needed(b))
      for (std::size_t i = 0; i < dy.size(); ++i) (*gb)[i] += dy[i] * av[i];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  auto& t = *x.tape;
  Tensor<T> y({1});
  for (auto v : t.value(x).vec()) y[0] += v;
  return t.record(std::move(y), t.requires_grad(x), [&t, x](const Tensor<T>& dy) {
    Tensor<T>& g = t.grad(x.id);
    for (auto& v : g.vec()) v += dy[0];
  });
}

}  // namespace ops
}  // namespace avz
