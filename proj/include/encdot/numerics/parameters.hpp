#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "encdot/numerics/tensor.hpp"

namespace encdot::nn {

// Named trainable tensors in insertion order.
class ParameterSet {
 public:
  Tensor& add(const std::string& name, Tensor tensor) {
    if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    tensor.set_requires_grad(true);
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(tensor));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) { return tensors_[lookup(name)]; }
  const Tensor& at(const std::string& name) const { return tensors_[lookup(name)]; }

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& t : tensors_) total += t.size();
    return total;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Normal(0, stddev) resampled until within two standard deviations.
inline Tensor truncated_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (float& v : t.data()) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = static_cast<float>(z * stddev);
  }
  return t;
}

inline Tensor filled(Shape shape, float value) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = value;
  return t;
}

}  // namespace encdot::nn
