#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ugformer/error.hpp"

namespace ugformer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

// Dense row-major array. Images use [batch, channel, height, width].
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims, T fill = T(0)) : dims_(std::move(dims)) {
    check_dims();
    data_.assign(shape_volume(dims_), fill);
  }

  Tensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_volume(dims_)) {
      throw Error(ErrorKind::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                                " does not match dims " + shape_string(dims_));
    }
  }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... Idx>
  T& operator()(Idx... idx) noexcept {
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }
  template <typename... Idx>
  const T& operator()(Idx... idx) const noexcept {
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape dims) const {
    Tensor out;
    out.dims_ = std::move(dims);
    out.check_dims();
    if (shape_volume(out.dims_) != data_.size()) {
      throw Error(ErrorKind::ShapeMismatch,
                  "cannot reshape " + shape_string(dims_) + " to " + shape_string(out.dims_));
    }
    out.data_ = data_;
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(dims_, std::move(out));
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  void require_finite(const std::string& what) const {
    if (!all_finite()) throw Error(ErrorKind::NonFiniteInput, what + " contains NaN or Inf");
  }

  bool same_shape(const Tensor& other) const noexcept { return dims_ == other.dims_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : dims_) {
      if (d == 0) throw Error(ErrorKind::ShapeMismatch, "zero-sized dimension in " + shape_string(dims_));
    }
  }

  template <typename... Idx>
  std::size_t offset(Idx... idx) const noexcept {
    const std::size_t index[] = {idx...};
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizeof...(Idx); ++i) off = off * dims_[i] + index[i];
    return off;
  }

  Shape dims_;
  std::vector<T> data_;
};

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const std::string& what) {
  if (t.dims() != expected) {
    throw Error(ErrorKind::ShapeMismatch,
                what + ": expected " + shape_string(expected) + ", got " + shape_string(t.dims()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const std::string& what) {
  if (t.rank() != rank) {
    throw Error(ErrorKind::ShapeMismatch, what + ": expected rank " + std::to_string(rank) +
                                              ", got " + shape_string(t.dims()));
  }
}

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.dims());
}

// a += b, elementwise.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    throw Error(ErrorKind::ShapeMismatch, "add " + shape_string(a.dims()) + " vs " + shape_string(b.dims()));
  }
  T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    throw Error(ErrorKind::ShapeMismatch, "dot " + shape_string(a.dims()) + " vs " + shape_string(b.dims()));
  }
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    throw Error(ErrorKind::ShapeMismatch, "compare " + shape_string(a.dims()) + " vs " + shape_string(b.dims()));
  }
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace ugformer
