#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
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

#include "segreg/errors.hpp"

namespace segreg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <class T>
class Tensor;

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::uint64_t order = node_counter().fetch_add(1, std::memory_order_relaxed);
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }

  bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

/// Dense row-major array with optional reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Data is never
/// modified by operations; only leaves expose mutable storage, for optimisers.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_ = std::make_shared<detail::Node<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
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

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t numel() const { return node().data.size(); }
  std::span<const T> data() const { return node().data; }
  const T& operator[](std::size_t i) const { return node().data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().leaf; }
  const char* op_name() const { return node().op; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  void zero_grad() { node().grad.clear(); }

  // Storage of a leaf, for in-place parameter updates between graphs.
  std::span<T> mutable_data() {
    if (!node().leaf) throw AutodiffError("mutable_data: only leaf tensors may be modified in place");
    return node().data;
  }

  // Leaf copy sharing no storage or history with this tensor.
  Tensor detach(bool requires_grad = false) const { return Tensor(shape(), node().data, requires_grad); }

  Tensor reshape(Shape new_shape) const;

  void backward() const;

  const NodePtr& node_ptr() const { return node_; }

 private:
  detail::Node<T>& node() const {
    if (!node_) throw AutodiffError("tensor: use of an undefined tensor");
    return *node_;
  }

  NodePtr node_;
};

/// Executed-operation record reachable from one root, in creation order.
///
/// Creation order is a valid topological order for a define-by-run tape:
/// every node is created after all of its inputs.
template <class T>
class Graph {
 public:
  using NodePtr = typename Tensor<T>::NodePtr;

  static Graph collect(const Tensor<T>& root) {
    Graph g;
    std::vector<detail::Node<T>*> stack{root.node_ptr().get()};
    std::unordered_set<const detail::Node<T>*> seen;
    while (!stack.empty()) {
      auto* n = stack.back();
      stack.pop_back();
      if (!n || !n->requires_grad) continue;
      if (seen.count(n)) continue;
      if (n->consumed) {
        throw AutodiffError("backward: graph through '" + std::string(n->op) +
                            "' was already consumed; double backward is unsupported");
      }
      seen.insert(n);
      g.nodes_.push_back(n);
      for (auto& in : n->inputs) stack.push_back(in.get());
    }
    std::sort(g.nodes_.begin(), g.nodes_.end(),
              [](const auto* a, const auto* b) { return a->order < b->order; });
    return g;
  }

  // Nodes in topological (creation) order; leaves included.
  const std::vector<detail::Node<T>*>& nodes() const { return nodes_; }

  std::vector<const char*> op_names() const {
    std::vector<const char*> out;
    for (auto* n : nodes_) out.push_back(n->op);
    return out;
  }

 private:
  std::vector<detail::Node<T>*> nodes_;
};

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw AutodiffError("backward: root must be a scalar, got shape " + shape_str(shape()));
  }
  if (node().consumed) throw AutodiffError("backward: graph was already consumed; double backward is unsupported");
  if (!requires_grad()) return;

  auto graph = Graph<T>::collect(*this);
  auto& nodes = graph.nodes();
  node().grad_buffer()[0] += T(1);
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto* n = *it;
    if (n->leaf || !n->backward_fn || n->grad.empty()) continue;
    n->backward_fn(*n);
  }
  for (auto* n : nodes) {
    if (n->leaf) continue;
    n->consumed = true;
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

namespace detail {

template <class T>
using BackwardFn = std::function<void(Node<T>&)>;

// Wraps a freshly computed value into a tensor, recording the op when any
// input tracks gradients and grad mode is enabled.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs, BackwardFn<T> backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_mode_enabled()) return out;
  bool track = false;
  for (const auto& in : inputs) track = track || (in.defined() && in.requires_grad());
  if (!track) return out;
  auto& n = *out.node_ptr();
  n.requires_grad = true;
  n.leaf = false;
  n.op = op;
  n.inputs.reserve(inputs.size());
  for (auto& in : inputs) n.inputs.push_back(in.node_ptr());
  n.backward_fn = std::move(backward);
  return out;
}

template <class T>
void require_finite(const char* op, std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
  }
}

}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(shape()) + " as " + shape_str(new_shape));
  }
  return detail::make_result<T>("reshape", std::move(new_shape), node().data, {*this},
                                [](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

}  // namespace segreg
