#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "specdraft/errors.hpp"

namespace specdraft {

using Shape = std::vector<std::size_t>;
using Token = std::int32_t;

enum class Precision { kSingle, kDouble };

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* precision_name(Precision p);
Precision parse_precision(const std::string& name);

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? Precision::kSingle : Precision::kDouble;
}

/// Dense row-major array. The product of the extents always equals the
/// number of stored scalars; a rank-0 tensor holds exactly one scalar.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T{0}) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, T value);
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  static constexpr Precision precision() noexcept { return precision_of<T>(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  /// Scalar value of a one-element tensor.
  T item() const;

  Tensor reshaped(Shape shape) const;
  void reshape(Shape shape);
  void fill(T value);

  bool all_finite() const noexcept;
  /// Throws NumericError naming `what` if any element is NaN or infinite.
  void require_finite(const char* what) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace specdraft
