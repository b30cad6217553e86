#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ralm/error.hpp"
#include "ralm/numerics.hpp"

namespace ralm {

// Per-layer key/value rows for one generation session.
//
// Storage for `capacity` rows is allocated up front. Rows [0, logical_len)
// are live; truncation only moves logical_len, so retained rows are never
// touched. Appends go through stage() for each layer followed by a single
// commit(), which lets the forward pass write layer i before computing
// attention at layer i while all layers still share one logical length.
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t layers, std::size_t width, std::size_t capacity)
      : width_(width), capacity_(capacity) {
    keys_.reserve(layers);
    values_.reserve(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      keys_.emplace_back(capacity, width);
      values_.emplace_back(capacity, width);
    }
  }

  std::size_t layers() const { return keys_.size(); }
  std::size_t width() const { return width_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t logical_len() const { return len_; }

  void truncate(std::size_t keep) {
    if (keep > len_)
      throw ShapeError("kvcache truncate: keep " + std::to_string(keep) + " > logical_len " +
                       std::to_string(len_));
    len_ = keep;
  }

  void clear() { len_ = 0; }

  void append(std::span<const Tensor2> new_keys, std::span<const Tensor2> new_values) {
    if (new_keys.size() != layers() || new_values.size() != layers())
      throw ShapeError("kvcache append: expected " + std::to_string(layers()) + " layers");
    const std::size_t n = new_keys.empty() ? 0 : new_keys[0].rows();
    for (std::size_t l = 0; l < layers(); ++l) {
      if (new_keys[l].rows() != n || new_values[l].rows() != n)
        throw ShapeError("kvcache append: inconsistent row counts across layers");
    }
    check_room(n);
    for (std::size_t l = 0; l < layers(); ++l) stage(l, new_keys[l], new_values[l]);
    commit(n);
  }

  // Writes rows [logical_len, logical_len + k.rows()) of one layer without
  // changing logical_len.
  void stage(std::size_t layer, const Tensor2& k, const Tensor2& v) {
    if (k.cols() != width_ || v.cols() != width_ || k.rows() != v.rows())
      throw ShapeError("kvcache stage: expected rows of width " + std::to_string(width_));
    check_room(k.rows());
    std::copy(k.values().begin(), k.values().end(), keys_[layer].row(len_).begin());
    std::copy(v.values().begin(), v.values().end(), values_[layer].row(len_).begin());
  }

  void commit(std::size_t n) {
    check_room(n);
    len_ += n;
  }

  void check_room(std::size_t n) const {
    if (len_ + n > capacity_)
      throw CapacityError("kvcache capacity exceeded: " + std::to_string(len_) + " + " +
                          std::to_string(n) + " > " + std::to_string(capacity_));
  }

  // Raw [capacity x width] storage; callers read only the live rows plus
  // whatever they staged themselves.
  const Tensor2& key_storage(std::size_t layer) const { return keys_[layer]; }
  const Tensor2& value_storage(std::size_t layer) const { return values_[layer]; }

  Tensor2 keys(std::size_t layer) const { return keys_[layer].slice_rows(0, len_); }
  Tensor2 values(std::size_t layer) const { return values_[layer].slice_rows(0, len_); }

 private:
  std::size_t width_ = 0;
  std::size_t capacity_ = 0;
  std::size_t len_ = 0;
  std::vector<Tensor2> keys_;
  std::vector<Tensor2> values_;
};

}  // namespace ralm
