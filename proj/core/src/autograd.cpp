#include "specdraft/autograd.hpp"

#include <unordered_set>

namespace specdraft {

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (!has_grad) {
    grad = Tensor<T>::zeros(value.shape());
    has_grad = true;
  }
  return grad;
}

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (node_->has_grad) return node_->grad;
  return Tensor<T>::zeros(node_->value.shape());
}

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn,
               const char* name) {
  value.require_finite(name);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

namespace {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <typename T>
void backward(const Var<T>& root, const Tensor<T>& seed) {
  Node<T>* r = root.node().get();
  if (!r->requires_grad) return;
  if (seed.shape() != r->value.shape()) {
    throw DimensionError("backward seed shape " + shape_str(seed.shape()) + " does not match root " +
                         shape_str(r->value.shape()));
  }
  Tensor<T>& g = r->grad_buffer();
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
  auto order = topo_order(r);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad) {
      n->grad.require_finite("backward pass");
      n->backward_fn(*n);
    }
  }
}

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1) {
    throw DimensionError("backward() without seed needs a one-element root, got " + shape_str(root.shape()));
  }
  backward(root, Tensor<T>::filled(root.shape(), T{1}));
}

template <typename T>
Var<T> detach(const Var<T>& v, bool requires_grad) {
  return Var<T>(v.value(), requires_grad);
}

template <typename T>
Parameter<T>::Parameter(std::string name, Tensor<T> value, bool trainable)
    : name_(std::move(name)), var_(std::move(value), trainable) {}

template <typename T>
Parameter<T>::Parameter(const Parameter& other)
    : name_(other.name_), var_(other.var_.value(), other.var_.requires_grad()) {}

template <typename T>
Parameter<T>& Parameter<T>::operator=(const Parameter& other) {
  if (this != &other) {
    name_ = other.name_;
    var_ = Var<T>(other.var_.value(), other.var_.requires_grad());
  }
  return *this;
}

template <typename T>
Tensor<T>& Parameter<T>::grad() {
  return var_.node()->grad_buffer();
}

template <typename T>
const Tensor<T>& Parameter<T>::grad() const {
  return var_.node()->grad_buffer();
}

template <typename T>
void Parameter<T>::zero_grad() {
  var_.node()->grad_buffer().fill(T{0});
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template class Parameter<float>;
template class Parameter<double>;

template Var<float> make_op(Tensor<float>, std::vector<Var<float>>, std::function<void(Node<float>&)>,
                            const char*);
template Var<double> make_op(Tensor<double>, std::vector<Var<double>>, std::function<void(Node<double>&)>,
                             const char*);
template void backward(const Var<float>&);
template void backward(const Var<double>&);
template void backward(const Var<float>&, const Tensor<float>&);
template void backward(const Var<double>&, const Tensor<double>&);
template Var<float> detach(const Var<float>&, bool);
template Var<double> detach(const Var<double>&, bool);

}  // namespace specdraft
