#pragma once

#include <algorithm>
#include <cmath>
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

#include "stf/errors.hpp"

namespace stf::inline STF_PRECISION_NS {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One recorded operation. Leaves have no inputs and no backward rule. The
// backward rule reads `self.grad` and accumulates into the inputs' grads
// using whatever intermediates it captured at forward time.
struct Node {
  Shape shape;
  std::vector<real> value;
  std::vector<real> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::vector<real>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), real(0));
    return grad;
  }
};

namespace detail {

struct AutogradState {
  bool grad_enabled = true;
  bool check_finite = false;
  std::string faulty_op;
};

inline AutogradState& autograd_state() {
  thread_local AutogradState state;
  return state;
}

}  // namespace detail

inline bool grad_enabled() { return detail::autograd_state().grad_enabled; }

// Disables graph recording for its lifetime (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::autograd_state().grad_enabled) {
    detail::autograd_state().grad_enabled = false;
  }
  ~NoGradGuard() { detail::autograd_state().grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// When on, every kernel output is scanned for NaN/Inf.
inline void set_check_finite(bool on) { detail::autograd_state().check_finite = on; }
inline bool check_finite_enabled() { return detail::autograd_state().check_finite; }

// Test hook: corrupts the vector-Jacobian product of the named kernel so the
// gradient checker has something to catch. Empty string disables it.
inline void inject_backward_fault(std::string op) { detail::autograd_state().faulty_op = std::move(op); }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->value.assign(shape_numel(shape), real(0));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, real v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                       " values, got " + std::to_string(values.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(real v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<real> data() { return node_->value; }
  std::span<const real> data() const { return node_->value; }
  std::vector<real>& values() { return node_->value; }
  const std::vector<real>& values() const { return node_->value; }

  // Gradient storage; zero-filled on first access.
  std::span<real> grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }

  real item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  const std::string& op() const { return node_->op; }

  // New leaf sharing no history.
  Tensor detach() const { return from(shape(), values(), false); }

  Node& node() const { return *node_; }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

inline void assert_finite(const Node& node) {
  for (std::size_t i = 0; i < node.value.size(); ++i) {
    if (!std::isfinite(node.value[i])) {
      throw NumericError("non-finite value from '" + node.op + "' at flat index " + std::to_string(i));
    }
  }
}

}  // namespace detail

// Builds the output of a kernel. The backward rule is kept only when
// recording is on and some input participates in differentiation.
inline Tensor make_result(std::string op, Shape shape, std::vector<real> values,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->value = std::move(values);
  if (node->value.size() != shape_numel(node->shape)) {
    throw ShapeError("kernel '" + node->op + "' produced inconsistent output size");
  }
  const bool track = grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                       return t.defined() && t.requires_grad();
                     });
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward_fn = std::move(backward);
  }
  if (check_finite_enabled()) detail::assert_finite(*node);
  return Tensor(std::move(node));
}

namespace detail {

inline std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

inline void run_faulty(Node& node) {
  std::vector<std::vector<real>> before;
  before.reserve(node.inputs.size());
  for (auto& in : node.inputs) before.push_back(in->requires_grad ? in->grad_buffer() : std::vector<real>{});
  node.backward_fn(node);
  for (std::size_t i = 0; i < node.inputs.size(); ++i) {
    if (!node.inputs[i]->requires_grad) continue;
    auto& g = node.inputs[i]->grad;
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = before[i][j] + real(1.5) * (g[j] - before[i][j]);
  }
}

}  // namespace detail

// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
// interior gradients are rebuilt from scratch on every call and released
// once propagated.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  Node* root = &loss.node();
  if (!root->requires_grad) return;
  auto order = detail::topological_order(root);
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), real(0));
  }
  root->grad_buffer()[0] += real(1);
  const std::string& faulty = detail::autograd_state().faulty_op;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf()) continue;
    if (!faulty.empty() && n->op == faulty) {
      detail::run_faulty(*n);
    } else {
      n->backward_fn(*n);
    }
    if (n != root) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

}  // namespace stf::inline STF_PRECISION_NS
