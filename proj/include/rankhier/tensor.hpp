// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense row-major tensor value type and the error types shared by the
 *         rest of the library.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rankhier {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

/// Row-major dense array. Rank 0 holds a single scalar.
template <typename T> class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data has " + std::to_string(data_.size()) +
                       " values for shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor(Shape{values.size()}, std::vector<T>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto &row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
  }

  const Shape &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rows when viewed as a matrix; a rank-1 tensor is one row.
  std::size_t rows() const {
    if (rank() == 0) return 1;
    if (rank() == 1) return 1;
    return shape_numel(Shape(shape_.begin(), shape_.end() - 1));
  }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  T *data() { return data_.data(); }
  const T *data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  T &at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T &at(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  T item() const {
    if (data_.size() != 1)
      throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  template <typename U> Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor &a, const Tensor &b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

}  // namespace rankhier
