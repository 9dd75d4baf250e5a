#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "avz/tensor.hpp"

namespace avz {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Ordered collection of named parameter tensors. The order is fixed at
/// construction and is the order of every aligned GradientSet, optimizer
/// state and checkpoint.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    for (const auto& e : entries_)
      if (e.name == name) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.size() - 1;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  Tensor<T>& operator[](std::size_t i) { return entries_[i].value; }
  const Tensor<T>& operator[](std::size_t i) const { return entries_[i].value; }
  const std::string& name(std::size_t i) const { return entries_[i].name; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    throw std::out_of_range("no parameter named '" + name + "'");
  }
  Tensor<T>& operator[](const std::string& n) { return (*this)[index_of(n)]; }
  const Tensor<T>& operator[](const std::string& n) const { return (*this)[index_of(n)]; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Flat view: element `flat` counted across tensors in order.
  T& flat(std::size_t flat) {
    for (auto& e : entries_) {
      if (flat < e.value.size()) return e.value[flat];
      flat -= e.value.size();
    }
    throw std::out_of_range("flat parameter index out of range");
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& e : entries_) {
      std::vector<U> v(e.value.vec().begin(), e.value.vec().end());
      out.add(e.name, Tensor<U>(e.value.shape(), std::move(v)));
    }
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value))
        return false;
    return true;
  }

 private:
  std::vector<NamedTensor<T>> entries_;
};

/// One tensor per parameter, shape-aligned with the ParameterSet it came from.
template <typename T>
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(const ParameterSet<T>& like) {
    grads_.reserve(like.size());
    for (const auto& e : like) grads_.emplace_back(e.value.shape());
  }

  std::size_t size() const noexcept { return grads_.size(); }
  Tensor<T>& operator[](std::size_t i) { return grads_[i]; }
  const Tensor<T>& operator[](std::size_t i) const { return grads_[i]; }

  void zero() {
    for (auto& g : grads_) g.fill(T{0});
  }

  /// this += scale * other
  void add_scaled(const GradientSet& other, T scale) {
    require_shape(other.size() == size(), "gradient sets of different length");
    for (std::size_t i = 0; i < size(); ++i) {
      require_shape(other[i].shape() == grads_[i].shape(), "gradient shapes differ");
      for (std::size_t j = 0; j < grads_[i].size(); ++j) grads_[i][j] += scale * other[i][j];
    }
  }

  T flat(std::size_t flat) const {
    for (const auto& g : grads_) {
      if (flat < g.size()) return g[flat];
      flat -= g.size();
    }
    throw std::out_of_range("flat gradient index out of range");
  }

  bool all_finite() const {
    for (const auto& g : grads_)
      if (!g.all_finite()) return false;
    return true;
  }

 private:
  std::vector<Tensor<T>> grads_;
};

template <typename T>
void require_aligned(const ParameterSet<T>& p, const GradientSet<T>& g) {
  require_shape(p.size() == g.size(), "parameter and gradient sets differ in length (" +
                                          std::to_string(p.size()) + " vs " + std::to_string(g.size()) + ")");
  for (std::size_t i = 0; i < p.size(); ++i)
    require_shape(p[i].shape() == g[i].shape(),
                  "gradient for '" + p.name(i) + "' has shape " + shape_string(g[i].shape()) +
                      ", parameter has " + shape_string(p[i].shape()));
}

}  // namespace avz
