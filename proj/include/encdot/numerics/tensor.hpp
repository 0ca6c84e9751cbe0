#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape.
//
// A BasicTensor is a shared handle: copies alias the same storage, the way
// parameters are shared between the two encoder pipelines. Operations in
// ops.hpp build the graph; backward() walks it in reverse topological order.

#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "encdot/error.hpp"

namespace encdot::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : BasicTensor(std::move(shape), false) {}

  // Exactly bool, so that Tensor(shape, {x}) picks the values overload.
  template <class B>
    requires std::same_as<B, bool>
  BasicTensor(Shape shape, B requires_grad) : node_(std::make_shared<Node<T>>()) {
    node_->data.assign(numel(shape), T(0));
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (values.size() != numel(shape)) {
      throw DimensionError("tensor: " + std::to_string(values.size()) +
                           " values do not fill shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor({1, 1}, {value}, requires_grad);
  }

  static BasicTensor from_node(std::shared_ptr<Node<T>> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  // 2D view: leading axis by the product of the rest.
  std::size_t rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
  std::size_t cols() const { return rows() == 0 ? 0 : size() / rows(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* raw() { return node_->data.data(); }
  const T* raw() const { return node_->data.data(); }

  T& at(std::size_t r, std::size_t c) { return node_->data[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }

  // Allocates (if needed) and clears the gradient buffer.
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
  void drop_grad() { node_->grad.clear(); }

  bool same_storage(const BasicTensor& other) const { return node_ == other.node_; }

  // Independent copy of the values with no graph attached.
  BasicTensor clone() const { return BasicTensor(shape(), node_->data, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  // Backpropagates from a single-element tensor. Intermediate graph links are
  // released afterwards; leaf gradients accumulate.
  void backward() {
    if (size() != 1) {
      throw DimensionError("backward() needs a scalar, got " + shape_str(shape()));
    }
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    for (Node<T>* node : order) {
      if (node->backward_fn) {
        node->backward_fn = nullptr;
        node->parents.clear();
        if (node != node_.get()) node->grad.clear();
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;

}  // namespace encdot::nn
