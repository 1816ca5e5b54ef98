#pragma once

#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "common/rng.hpp"
#include "tensor/tape.hpp"

namespace magmix {

// Owns a model's parameters and non-trainable buffers with stable addresses
// and unique names.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter<T>& add(const std::string& name, Tensor<T> init, bool decay) {
    check_unique(name);
    params_.emplace_back(name, std::move(init), decay);
    return params_.back();
  }

  Tensor<T>& add_buffer(const std::string& name, Tensor<T> init) {
    check_unique(name);
    buffers_.emplace_back(name, std::move(init));
    return buffers_.back().second;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
  }
  std::deque<std::pair<std::string, Tensor<T>>>& buffers() { return buffers_; }
  const std::deque<std::pair<std::string, Tensor<T>>>& buffers() const { return buffers_; }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Tensor<T>* find_buffer(const std::string& name) {
    for (auto& b : buffers_)
      if (b.first == name) return &b.second;
    return nullptr;
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  void check_unique(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
    for (const auto& b : buffers_)
      if (b.first == name) throw ConfigError("duplicate buffer name '" + name + "'");
  }

  std::deque<Parameter<T>> params_;
  std::deque<std::pair<std::string, Tensor<T>>> buffers_;
};

namespace init {

template <typename T>
Tensor<T> trunc_normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.storage()) v = T(rng.truncated_normal(stddev));
  return t;
}

// He-style scaling for spatial convolutions: std = sqrt(2 / fan_in).
template <typename T>
Tensor<T> fan_in(Shape shape, Index fan_in, Rng& rng) {
  return trunc_normal<T>(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

template <typename T>
Tensor<T> constant(Shape shape, T value) {
  return Tensor<T>(std::move(shape), value);
}

}  // namespace init

}  // namespace magmix
