#include "specdraft/kv_cache.hpp"

#include <algorithm>
#include <functional>
#include <string>

namespace specdraft {

template <typename T>
KVCache<T>::KVCache(std::size_t layers, std::size_t batch, std::size_t capacity, std::size_t width)
    : batch_(batch),
      capacity_(capacity),
      width_(width),
      lengths_(layers, 0),
      keys_(layers, std::vector<T>(batch * capacity * width)),
      values_(layers, std::vector<T>(batch * capacity * width)) {
  if (layers == 0 || batch == 0 || capacity == 0 || width == 0) {
    throw ParameterError("kv cache extents must be positive");
  }
}

template <typename T>
void KVCache<T>::check_layer(std::size_t layer) const {
  if (layer >= lengths_.size()) {
    throw DimensionError("kv cache layer " + std::to_string(layer) + " out of range (" +
                         std::to_string(lengths_.size()) + " layers)");
  }
}

template <typename T>
std::size_t KVCache<T>::layer_length(std::size_t layer) const {
  check_layer(layer);
  return lengths_[layer];
}

template <typename T>
std::size_t KVCache<T>::length() const noexcept {
  return lengths_.empty() ? 0 : *std::max_element(lengths_.begin(), lengths_.end());
}

template <typename T>
bool KVCache<T>::aligned() const noexcept {
  return std::adjacent_find(lengths_.begin(), lengths_.end(), std::not_equal_to<>()) == lengths_.end();
}

template <typename T>
void KVCache<T>::append(std::size_t layer, const Tensor<T>& k, const Tensor<T>& v) {
  check_layer(layer);
  if (k.rank() != 3 || k.shape() != v.shape() || k.dim(0) != batch_ || k.dim(2) != width_) {
    throw DimensionError("kv cache append expects (" + std::to_string(batch_) + ", n, " + std::to_string(width_) +
                         ") keys and values, got " + shape_str(k.shape()) + " and " + shape_str(v.shape()));
  }
  const std::size_t n = k.dim(1);
  const std::size_t len = lengths_[layer];
  if (len + n > capacity_) {
    throw CapacityError("kv cache overflow: " + std::to_string(len) + " + " + std::to_string(n) + " > " +
                        std::to_string(capacity_));
  }
  for (std::size_t b = 0; b < batch_; ++b) {
    std::copy_n(k.data().data() + b * n * width_, n * width_,
                keys_[layer].data() + (b * capacity_ + len) * width_);
    std::copy_n(v.data().data() + b * n * width_, n * width_,
                values_[layer].data() + (b * capacity_ + len) * width_);
  }
  lengths_[layer] = len + n;
}

template <typename T>
Tensor<T> KVCache<T>::gather(const std::vector<T>& store, std::size_t layer) const {
  const std::size_t len = lengths_[layer];
  Tensor<T> out({batch_, len, width_});
  for (std::size_t b = 0; b < batch_; ++b) {
    std::copy_n(store.data() + b * capacity_ * width_, len * width_, out.data().data() + b * len * width_);
  }
  return out;
}

template <typename T>
Tensor<T> KVCache<T>::keys(std::size_t layer) const {
  check_layer(layer);
  return gather(keys_[layer], layer);
}

template <typename T>
Tensor<T> KVCache<T>::values(std::size_t layer) const {
  check_layer(layer);
  return gather(values_[layer], layer);
}

template <typename T>
void KVCache<T>::truncate(std::size_t len) {
  if (len > length()) {
    throw CapacityError("cannot truncate kv cache of length " + std::to_string(length()) + " to " +
                        std::to_string(len));
  }
  for (auto& l : lengths_) l = std::min(l, len);
}

template class KVCache<float>;
template class KVCache<double>;

}  // namespace specdraft
