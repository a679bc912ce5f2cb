#pragma once

#include <cstddef>
#include <vector>

#include "specdraft/tensor.hpp"

namespace specdraft {

/// Per-layer key/value storage for incremental decoding. Layout per layer is
/// (batch, capacity, width) with the first layer_length(l) rows populated.
/// The base model owns layers [0, L); the draft model's context attention
/// owns the extra layer L. Between decoding steps every layer holds the same
/// number of positions; inside a step the draft layer may trail the base.
template <typename T>
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t layers, std::size_t batch, std::size_t capacity, std::size_t width);

  std::size_t layers() const noexcept { return lengths_.size(); }
  std::size_t batch() const noexcept { return batch_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t width() const noexcept { return width_; }

  std::size_t layer_length(std::size_t layer) const;
  /// Committed context length: the longest layer.
  std::size_t length() const noexcept;
  /// True when every layer holds the same number of positions.
  bool aligned() const noexcept;

  /// Appends (batch, n, width) keys and values to `layer`.
  void append(std::size_t layer, const Tensor<T>& keys, const Tensor<T>& values);
  /// Populated keys of `layer` as (batch, length, width).
  Tensor<T> keys(std::size_t layer) const;
  Tensor<T> values(std::size_t layer) const;

  /// Drops every position at index >= len in all layers. Throws when len
  /// exceeds the committed length.
  void truncate(std::size_t len);
  void clear() { truncate(0); }

 private:
  void check_layer(std::size_t layer) const;
  Tensor<T> gather(const std::vector<T>& store, std::size_t layer) const;

  std::size_t batch_ = 0;
  std::size_t capacity_ = 0;
  std::size_t width_ = 0;
  std::vector<std::size_t> lengths_;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
};

/// Rolls `cache` back to its first `len` positions.
template <typename T>
KVCache<T>& truncate_cache(KVCache<T>& cache, std::size_t len) {
  cache.truncate(len);
  return cache;
}

extern template class KVCache<float>;
extern template class KVCache<double>;

}  // namespace specdraft
