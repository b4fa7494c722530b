// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor used for images, feature maps, embeddings and
// gradients. Channels are always the last axis.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace cma {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ", ";
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

// Element types a tensor may carry, with their on-disk dtype codes.
enum class DType : std::uint8_t { f32 = 1, u8 = 2, i32 = 3, f64 = 4 };

template <class T> struct dtype_of;
template <> struct dtype_of<float> { static constexpr DType value = DType::f32; };
template <> struct dtype_of<std::uint8_t> { static constexpr DType value = DType::u8; };
template <> struct dtype_of<std::int32_t> { static constexpr DType value = DType::i32; };
template <> struct dtype_of<double> { static constexpr DType value = DType::f64; };

template <class T>
concept Element = requires { dtype_of<T>::value; };

template <Element T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const {
    return data_[offset(idx)];
  }

  // Scalar value of a rank-0 (or single-element) tensor.
  T item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape_));
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                       to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <Element U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw ShapeError("index rank mismatch for shape " + to_string(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) throw ShapeError("index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) +
                     " vs " + to_string(b));
  }
}

template <class T>
void require_finite(const Tensor<T>& t, const char* what) {
  if constexpr (std::is_floating_point_v<T>) {
    for (T v : t.values()) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string(what) + ": non-finite value");
      }
    }
  }
}

// Product of all but the last extent; the number of "positions" a
// channels-last tensor holds.
inline std::size_t leading(const Shape& shape) {
  if (shape.empty()) return 1;
  return numel(shape) / shape.back();
}

}  // namespace cma
