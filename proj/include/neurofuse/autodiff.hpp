#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "neurofuse/tensor.hpp"

namespace nf {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `self.grad` and accumulates into `self.parents[i]->grad`.
  std::function<void(Node& self)> backward_fn;

  void accumulate(const Tensor<T>& g);
  Tensor<T>& grad_buffer();
};

/// Handle to a value recorded on the autodiff graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  /// Leaf variable. Gradients accumulate into it when `requires_grad`.
  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_meta() const { return node_->value.is_meta(); }

  /// Accumulated gradient; zeros when nothing has flowed into this node.
  Tensor<T> grad() const {
    if (node_->grad.defined()) return node_->grad;
    return Tensor<T>::zeros_like(node_->value);
  }
  bool has_grad() const { return node_ && node_->grad.defined(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

inline bool& grad_recording() {
  thread_local bool on = true;
  return on;
}

/// Disables graph recording in scope; ops return plain values.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_recording()) { grad_recording() = false; }
  ~NoGradGuard() { grad_recording() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Creates the result node of an op. The node only records parents and a
/// backward closure when at least one input requires a gradient, so frozen
/// subgraphs release their activations as soon as they go out of scope.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_recording()) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) n->requires_grad = true;
    }
  }
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.shared());
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

/// Identity op whose output always requires a gradient. Used to read
/// gradients with respect to an intermediate activation.
template <typename T>
Var<T> watch(const Var<T>& x);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// node that requires one, including parameter leaves.
template <typename T>
void backward(const Var<T>& loss);

/// Seeds the sweep with an explicit upstream gradient instead of ones.
template <typename T>
void backward(const Var<T>& output, const Tensor<T>& seed);

}  // namespace nf
