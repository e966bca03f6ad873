#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "trajground/error.hpp"
#include "trajground/numerics/tensor.hpp"
#include "trajground/rng.hpp"

namespace trajground::num {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Named learnable tensors with their accumulated gradients, in insertion
/// order.
template <class T>
class ParamStore {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value) {
    if (index_.count(name)) fail(ErrorCode::ShapeMismatch, "parameter '" + name + "' already exists");
    index_.emplace(name, params_.size());
    Tensor<T> grad(value.shape());
    params_.push_back({std::move(name), std::move(value), std::move(grad)});
    return params_.back();
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }
  std::size_t index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) fail(ErrorCode::ShapeMismatch, "no parameter named '" + std::string(name) + "'");
    return it->second;
  }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  Parameter<T>& get(std::string_view name) { return params_[index(name)]; }
  const Parameter<T>& get(std::string_view name) const { return params_[index(name)]; }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T{0});
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

  /// Copies values from a store with the same names and shapes.
  template <class U>
  void assign_from(const ParamStore<U>& other) {
    for (auto& p : params_) {
      const auto& src = other.get(p.name);
      if (src.value.shape() != p.value.shape()) fail(ErrorCode::ShapeMismatch, "shape mismatch for '" + p.name + "'");
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(src.value[i]);
    }
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
Tensor<T> xavier_uniform(Shape shape, CounterRng& rng) {
  Tensor<T> t(shape);
  const double fan_in = static_cast<double>(shape.size() >= 2 ? shape[shape.size() - 2] : shape.back());
  const double fan_out = static_cast<double>(shape.back());
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Tensor<T> normal_tensor(Shape shape, double stddev, CounterRng& rng) {
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

}  // namespace trajground::num
