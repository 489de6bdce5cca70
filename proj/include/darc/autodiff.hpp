#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "darc/tensor.hpp"

namespace darc {

// Reverse-mode autodiff over dynamically built graphs. Nodes are created in
// topological order (a global counter), so the backward sweep is a simple
// sort of the reachable set by creation order.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily; same shape as value
  bool requires_grad = false;
  long order = 0;
  std::vector<Var> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backprop;

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

// Trainable leaf.
Var make_leaf(Tensor value);

// Non-trainable input; backward never propagates into it.
Var make_const(Tensor value);

// Interior node; requires_grad is inherited from parents.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop);

// Accumulates d(root)/d(leaf) into every reachable leaf's grad. Root must be
// scalar. Existing grads are added to, so callers zero them between steps.
void backward(const Var& root);

}  // namespace darc
