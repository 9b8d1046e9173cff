#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "ltsp/error.hpp"

namespace ltsp {

// Extents, outermost first; tensors are rank 1..5, row-major.
using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline void check_shape_valid(const Shape& shape) {
  require(!shape.empty() && shape.size() <= 5, ErrorCategory::shape, "bad_rank",
          "tensor rank must be 1..5, got " + shape_str(shape));
  for (int64_t e : shape)
    require(e > 0, ErrorCategory::shape, "bad_extent", "non-positive extent in " + shape_str(shape));
}

namespace detail {

// Set false (via NoGradGuard) to run forward passes without recording the
// graph, e.g. during inference.
inline thread_local bool grad_recording = true;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized by backward() for nodes that need it
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode<T>>> inputs;
  std::function<void(TensorNode<T>&)> backprop;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
};

}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_recording) { detail::grad_recording = false; }
  ~NoGradGuard() { detail::grad_recording = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Shared handle to a graph node. Copies alias the same storage.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    check_shape_valid(shape);
    auto node = std::make_shared<Node>();
    node->value.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    check_shape_valid(shape);
    require(static_cast<int64_t>(data.size()) == shape_numel(shape), ErrorCategory::shape,
            "data_size", "data length " + std::to_string(data.size()) + " does not match " +
                             shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t extent(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }
  int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& grad() { return node_->grad; }

  T item() const {
    require(numel() == 1, ErrorCategory::shape, "not_scalar",
            "item() on tensor of shape " + shape_str(node_->shape));
    return node_->value[0];
  }

  std::shared_ptr<Node> node() const { return node_; }
  Node* raw() const { return node_.get(); }

  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

// Builds a non-leaf node; requires_grad is inherited from the inputs while
// recording is enabled. The backprop closure is installed by the caller only
// when the node tracks gradients.
template <typename T>
Tensor<T> make_op(Shape shape, const char* op,
                  std::initializer_list<std::shared_ptr<TensorNode<T>>> inputs) {
  auto node = std::make_shared<TensorNode<T>>();
  node->value.resize(shape_numel(shape));
  node->shape = std::move(shape);
  node->op = op;
  node->leaf = false;
  if (grad_recording) {
    for (const auto& in : inputs)
      if (in->requires_grad) node->requires_grad = true;
    if (node->requires_grad) node->inputs.assign(inputs);
  }
  return Tensor<T>(std::move(node));
}

// Gradient buffer of an input inside a backprop closure, or nullptr when that
// input does not participate in the backward pass.
template <typename T>
T* grad_of(const std::shared_ptr<TensorNode<T>>& node) {
  return node->requires_grad ? node->grad.data() : nullptr;
}

}  // namespace detail

// Reverse-mode pass from a scalar loss. Gradient policy: every reachable
// node's grad is reset to zero first, then written; leaf tensors keep their
// gradients, interior buffers are released as soon as they are consumed.
// Calling backward twice recomputes the same gradients (no accumulation).
template <typename T>
void backward(const Tensor<T>& loss) {
  require(loss.defined(), ErrorCategory::shape, "undefined_tensor", "backward on undefined tensor");
  require(loss.numel() == 1, ErrorCategory::shape, "nonscalar_loss",
          "backward requires a scalar loss, got " + shape_str(loss.shape()));
  require(loss.requires_grad(), ErrorCategory::numeric, "untracked_loss",
          "backward on a loss with no tracked operations");

  using Node = detail::TensorNode<T>;
  std::vector<Node*> order;  // topological: producers before consumers
  {
    std::unordered_set<Node*> seen;
    // Iterative DFS; the second stack entry marks post-order emission.
    std::vector<std::pair<Node*, bool>> stack{{loss.raw(), false}};
    while (!stack.empty()) {
      auto [node, emit] = stack.back();
      stack.pop_back();
      if (emit) {
        order.push_back(node);
        continue;
      }
      if (!seen.insert(node).second) continue;
      stack.emplace_back(node, true);
      for (const auto& in : node->inputs)
        if (in->requires_grad && !seen.count(in.get())) stack.emplace_back(in.get(), false);
    }
  }

  for (Node* node : order) node->grad.assign(node->value.size(), T(0));
  loss.raw()->grad[0] = T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) node->backprop(*node);
    if (!node->leaf) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

}  // namespace ltsp
