#pragma once

// Dense row-major tensor with define-by-run reverse-mode differentiation.
//
// Every op produces a fresh Node. When gradient recording is enabled and at
// least one input requires a gradient, the node keeps its inputs alive and a
// closure that pushes the output gradient back into them. backward() walks the
// recorded graph once in reverse topological order.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "swintext/errors.hpp"

namespace swintext {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_mode = true;
inline thread_local std::uint64_t node_counter = 0;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording for its lifetime (inference, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::uint64_t id = detail::node_counter++;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Node&)> backward_fn;  // receives the finished output node

  bool is_leaf() const { return !backward_fn; }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                       " values but " + std::to_string(values.size()) + " were given");
    }
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
    }
    node_ = std::make_shared<Node<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  /// Size of dimension i; negative indices count from the back.
  std::size_t dim(std::ptrdiff_t i) const {
    const auto r = static_cast<std::ptrdiff_t>(rank());
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ShapeError("dim index out of range for shape " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(i)];
  }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t i = 0;
    for (auto v : index) {
      if (v >= node_->shape[i]) throw ShapeError("index out of range for shape " + shape_str(shape()));
      flat = flat * node_->shape[i] + v;
      ++i;
    }
    return node_->data[flat];
  }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Build the output of a differentiable op. `backward` receives the output
/// node (data and grad) and is only stored when recording is on and some input
/// needs it.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor<T>> inputs,
                      Backward&& backward) {
  return make_result(std::move(shape), std::move(values), std::vector<Tensor<T>>(inputs),
                     std::forward<Backward>(backward));
}

/// Recorded operations reachable from a root, in topological order (inputs
/// before the ops that consume them).
template <class T>
class Tape {
 public:
  explicit Tape(const Tensor<T>& root) {
    if (!root.defined() || !root.requires_grad()) return;
    std::unordered_set<const Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<Node<T>*>& nodes() const { return order_; }
  bool empty() const { return order_.empty(); }

  std::size_t op_count() const {
    return static_cast<std::size_t>(
        std::count_if(order_.begin(), order_.end(), [](const Node<T>* n) { return !n->is_leaf(); }));
  }

  /// Propagate from the root (last node). Each node is visited exactly once.
  void run() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* node = *it;
      if (node->is_leaf() || node->grad.empty()) continue;
      node->backward_fn(*node);
    }
  }

 private:
  std::vector<Node<T>*> order_;
};

/// Populate d(loss)/d(leaf) for every leaf that requires a gradient.
/// Gradients accumulate across calls until zero_grad().
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<none>"));
  }
  Tape<T> tape(loss);
  if (tape.empty() || loss.node()->is_leaf()) {
    throw UsageError("backward on a loss that depends on no recorded operation");
  }
  loss.node()->grad_buffer()[0] += T(1);
  tape.run();
}

}  // namespace swintext
