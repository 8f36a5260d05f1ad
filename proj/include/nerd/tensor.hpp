#pragma once

// Dense row-major tensor with tape-free reverse-mode differentiation.
//
// Every op returns a fresh Tensor whose value is immutable once built. When
// gradient recording is enabled and at least one input requires a gradient,
// the result keeps shared handles to its inputs plus a closure that pushes the
// incoming gradient back to them. Tensor::backward() walks that DAG once in
// reverse topological order and then releases the intermediate nodes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace nerd {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Unreadable, unwritable or corrupt file.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->value.assign(numel_of(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != values.size())
      throw ShapeError("tensor: shape " + to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Mutable access; only meaningful for leaves (parameters, inputs).
  std::span<T> data_mut() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && numel() > 0; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw ShapeError("at: rank mismatch");
    std::size_t flat = 0, k = 0;
    for (std::size_t i : idx) {
      if (i >= node_->shape[k]) throw ShapeError("at: index out of range");
      flat = flat * node_->shape[k++] + i;
    }
    return node_->value[flat];
  }

  /// Same values, no graph history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  /// Reverse-mode sweep from a single-element tensor. Leaves keep their
  /// accumulated gradient; intermediate nodes are released afterwards.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward: loss must be a single element");
    if (!node_->requires_grad) return;

    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<const Node<T>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{node_, 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size()) {
        auto child = n->inputs[next++];
        if (child && child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->grad_buffer()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && n.grad.size() == n.value.size()) n.backward(n);
    }
    for (auto& n : order) {
      if (n->backward) {
        n->backward = nullptr;
        n->inputs.clear();
        n->grad.clear();
        n->grad.shrink_to_fit();
      }
    }
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Builds an op result. The closure runs only if some input needs a gradient
  /// and recording is enabled.
  static Tensor make(Shape shape, std::vector<T> value, std::vector<Tensor> inputs,
                     std::function<void(Node<T>&)> backward) {
    Tensor out(std::move(shape), std::move(value));
    if (!grad_enabled()) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    // Undefined inputs stay as null slots so closures can index by position.
    for (auto& t : inputs) out.node_->inputs.push_back(t.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Gradient sink for input i of a node, or nullptr when it needs none.
template <typename T>
inline std::vector<T>* grad_sink(Node<T>& n, std::size_t i) {
  if (i >= n.inputs.size() || !n.inputs[i] || !n.inputs[i]->requires_grad) return nullptr;
  return &n.inputs[i]->grad_buffer();
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

template <typename T>
inline bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace nerd
