#include "specdraft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace specdraft {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

const char* precision_name(Precision p) {
  return p == Precision::kSingle ? "single" : "double";
}

Precision parse_precision(const std::string& name) {
  if (name == "single") return Precision::kSingle;
  if (name == "double") return Precision::kDouble;
  throw ParameterError("unknown precision '" + name + "'");
}

template <typename T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T{0}) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_numel(shape_)) + " scalars, got " +
                         std::to_string(data_.size()));
  }
}

template <typename T>
Tensor<T> Tensor<T>::filled(Shape shape, T value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index rank " + std::to_string(index.size()) + " does not match shape " +
                         shape_str(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for shape " + shape_str(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  Tensor out = *this;
  out.reshape(std::move(shape));
  return out;
}

template <typename T>
void Tensor<T>::reshape(Shape shape) {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::require_finite(const char* what) const {
  if (!all_finite()) throw NumericError(std::string("non-finite value produced by ") + what);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace specdraft
