#include "latentmap/tensor/graph.hpp"

namespace latentmap {

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::out_of_range("graph variable " + std::to_string(v.id) + " is not recorded");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  return const_cast<Node&>(static_cast<const Graph&>(*this).node(v));
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Graph<T>::variable(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Graph<T>::parameter(const Tensor<T>& value, std::string name, bool requires_grad) {
  Node n;
  n.external = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  Var v{static_cast<int>(nodes_.size()) - 1};
  params_.push_back({std::move(name), v});
  return v;
}

template <typename T>
Var Graph<T>::record(Tensor<T> value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  const Node& n = node(v);
  return n.external ? *n.external : n.owned;
}

template <typename T>
Tensor<T> Graph<T>::grad(Var v) const {
  const Node& n = node(v);
  if (!n.grad.empty()) return n.grad;
  return Tensor<T>(value(v).shape());
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(value(loss).shape()));
  }
  grad_buffer(loss)[0] += T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace latentmap
