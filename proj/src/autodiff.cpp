#include "neurofuse/autodiff.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace nf {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (!grad.defined()) grad = Tensor<T>(value.shape());
  return grad;
}

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
  if (g.shape() != value.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                     shape_str(value.shape()));
  }
  if (!grad.defined()) {
    grad = g;
    return;
  }
  auto dst = grad.data();
  auto src = g.data();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Var<T> watch(const Var<T>& x) {
  auto n = std::make_shared<Node<T>>();
  n->value = x.value();
  n->requires_grad = true;
  if (x.requires_grad()) {
    n->parents.push_back(x.shared());
    n->backward_fn = [](Node<T>& self) { self.parents[0]->accumulate(self.grad); };
  }
  return Var<T>(std::move(n));
}

namespace {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS; networks are deep enough to make recursion risky.
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <typename T>
void backward(const Var<T>& output, const Tensor<T>& seed) {
  if (!output.defined()) throw std::logic_error("backward called before any forward pass");
  if (output.is_meta()) throw std::logic_error("backward through a shape-only graph");
  if (!output.requires_grad()) return;
  Node<T>* root = output.node();
  root->accumulate(seed);
  auto order = topo_order(root);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
  }
}

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined()) throw std::logic_error("backward called before any forward pass");
  if (loss.value().size() != 1) {
    throw ShapeError("backward expects a scalar loss, got " + shape_str(loss.shape()));
  }
  backward(loss, Tensor<T>(loss.shape(), T(1)));
}

template struct Node<float>;
template struct Node<double>;
template Var<float> watch(const Var<float>&);
template Var<double> watch(const Var<double>&);
template void backward(const Var<float>&);
template void backward(const Var<double>&);
template void backward(const Var<float>&, const Tensor<float>&);
template void backward(const Var<double>&, const Tensor<double>&);

}  // namespace nf
