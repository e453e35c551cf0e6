// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "gmmoe/tensor.hpp"

namespace gmmoe {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `grad` of this node and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  bool is_leaf() const { return !backward_fn; }

  Tensor<Scalar>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<Scalar>(value.shape());
    return grad;
  }

  // Gradient buffer of input i, or nullptr when that input is a constant.
  Tensor<Scalar>* input_grad(std::size_t i) {
    return inputs[i]->requires_grad ? &inputs[i]->grad_buffer() : nullptr;
  }
  const Tensor<Scalar>& input_value(std::size_t i) const { return inputs[i]->value; }
};

// Thread-local switch; while disabled no graph is recorded and intermediate
// tensors are released as soon as their Var goes out of scope.
class GradMode {
 public:
  static bool enabled() { return enabled_ref(); }
  static void set_enabled(bool on) { enabled_ref() = on; }

 private:
  static bool& enabled_ref() {
    thread_local bool enabled = true;
    return enabled;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a node of the dynamic computation graph.
///
/// Copies share the node. Leaves created with `requires_grad` are trainable
/// parameters; every op result records its inputs and a backward closure
/// only when some input requires a gradient and grad mode is on.
template <typename Scalar>
class Var {
 public:
  using NodeType = Node<Scalar>;

  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  // Only for leaves: the optimizer and test harnesses mutate parameters here.
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return node_->grad.shape() == node_->value.shape(); }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  Tensor<Scalar>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() {
    if (has_grad()) node_->grad.set_zero();
  }

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

// Wraps an op result. `backward` is kept only if grad mode is on and at least
// one input requires grad.
template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs,
                        std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.ptr());
    node->backward_fn = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}

/// Reverse-mode sweep from `root`. The seed defaults to ones (so a scalar
/// root yields d root / d leaf). Interior nodes release their graph and
/// gradient buffers afterwards; leaf gradients accumulate.
template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>* seed = nullptr);

}  // namespace gmmoe
