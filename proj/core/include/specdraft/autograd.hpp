#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "specdraft/tensor.hpp"

namespace specdraft {

template <typename T>
struct Node {
  Tensor<T> value;
  /// Empty (numel 0 semantics via has_grad) until something flows in.
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  /// Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;

  /// Lazily allocates a zero gradient matching value's shape.
  Tensor<T>& grad_buffer();
};

/// Reverse-mode differentiable value. Cheap to copy (shared node).
template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const noexcept { return node_->value; }
  const Shape& shape() const noexcept { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const noexcept { return node_->requires_grad; }
  bool has_grad() const noexcept { return node_->has_grad; }
  /// Gradient accumulated by backward(); zeros if none arrived.
  Tensor<T> grad() const;

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an operation node. When no input requires a gradient the result is
/// a constant and `backward_fn` is dropped, so inference records no graph.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn,
               const char* name);

/// Backpropagates from a one-element root with seed 1.
template <typename T>
void backward(const Var<T>& root);

/// Backpropagates from `root` with an explicit upstream gradient.
template <typename T>
void backward(const Var<T>& root, const Tensor<T>& seed);

/// A fresh leaf holding the same value, cut from the producing graph.
template <typename T>
Var<T> detach(const Var<T>& v, bool requires_grad = false);

/// A named, persistent leaf with an optional gradient.
template <typename T>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor<T> value, bool trainable = true);
  /// Copies clone the value into a fresh leaf; moves keep the leaf.
  Parameter(const Parameter& other);
  Parameter& operator=(const Parameter& other);
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const std::string& name() const noexcept { return name_; }
  const Var<T>& var() const noexcept { return var_; }
  Tensor<T>& value() noexcept { return var_.node()->value; }
  const Tensor<T>& value() const noexcept { return var_.node()->value; }
  const Shape& shape() const noexcept { return var_.shape(); }
  std::size_t numel() const noexcept { return var_.value().numel(); }

  /// Gradient buffer; same shape as value.
  Tensor<T>& grad();
  const Tensor<T>& grad() const;

  bool trainable() const noexcept { return var_.node()->requires_grad; }
  void set_trainable(bool trainable) noexcept { var_.node()->requires_grad = trainable; }
  void zero_grad();

 private:
  std::string name_;
  Var<T> var_;
};

extern template class Var<float>;
extern template class Var<double>;
extern template class Parameter<float>;
extern template class Parameter<double>;

}  // namespace specdraft
