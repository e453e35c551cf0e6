// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/autograd.hpp"

#include <unordered_set>

namespace gmmoe {

template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>* seed) {
  using NodeT = Node<Scalar>;
  if (!root.defined() || !root.requires_grad()) return;

  // Iterative post-order DFS; graphs of full models are thousands of nodes deep.
  // `order` owns the nodes so releasing a consumer cannot free a queued producer.
  std::vector<std::shared_ptr<NodeT>> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack{{root.ptr(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      std::shared_ptr<NodeT> child = node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  Tensor<Scalar>& root_grad = root.node()->grad_buffer();
  if (seed) {
    if (seed->shape() != root.shape()) throw ShapeError("backward seed shape mismatch");
    root_grad.vec() += seed->vec();
  } else {
    root_grad.vec().array() += Scalar(1);
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    std::shared_ptr<NodeT> node = std::move(*it);
    if (node->is_leaf()) continue;
    if (node->grad.shape() == node->value.shape()) node->backward_fn(*node);
    node->backward_fn = nullptr;
    node->inputs.clear();
    node->requires_grad = false;
    node->grad = Tensor<Scalar>();
  }
}

template void backward<float>(const Var<float>&, const Tensor<float>*);
template void backward<double>(const Var<double>&, const Tensor<double>*);

}  // namespace gmmoe
