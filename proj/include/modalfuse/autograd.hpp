#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "modalfuse/tensor.hpp"

namespace modalfuse {

class Var;

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward;

  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

}  // namespace detail

/// Handle to a node in the reverse-mode autodiff graph. Cheap to copy; copies
/// alias the same node.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  static Var leaf(Tensor value, bool requires_grad);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  /// Direct write access, used by optimizers and weight loaders.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  friend Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward);

 private:
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Creates a result node. The backward closure is dropped when no input
/// requires grad, so constant subgraphs cost nothing in the backward pass.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward);

/// Reverse pass from a scalar root, seeding d(root)/d(root) = 1.
void backward(const Var& root);

/// Reverse pass with an explicit output cotangent.
void backward(const Var& root, const Tensor& seed);

}  // namespace modalfuse
