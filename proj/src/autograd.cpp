#include "modalfuse/autograd.hpp"

#include <unordered_set>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace detail {

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    if (g.shape() != value.shape()) {
      throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                       shape_str(value.shape()));
    }
    grad = g;
  } else {
    grad += g;
  }
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor::zeros_like(value);
  return grad;
}

}  // namespace detail

Var Var::constant(Tensor value) { return leaf(std::move(value), false); }

Var Var::leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    // Undefined optional inputs (e.g. a missing bias) stay as null slots so
    // backward closures can index inputs positionally.
    for (auto& in : inputs) node->inputs.push_back(in.defined() ? in.node_ptr() : nullptr);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (root.value().numel() != 1) {
    throw ShapeError("backward() without a seed needs a scalar root, got " +
                     shape_str(root.shape()));
  }
  backward(root, Tensor(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed) {
  if (!root.requires_grad()) return;

  // Iterative post-order DFS so deep graphs do not exhaust the stack.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&root.node(), 0);
  visited.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node().accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  // Interior gradients are not needed after the pass; leaves keep theirs.
  for (detail::Node* node : order) {
    if (node->backward) node->grad = Tensor();
  }
}

}  // namespace modalfuse
