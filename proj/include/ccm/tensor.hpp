#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ccm/errors.hpp"

namespace ccm {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major storage. Gradients live on autograd nodes, not here.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(static_cast<size_t>(checked_numel(shape_)), fill) {}

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != checked_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i < 0 ? i + rank() : i)); }
  int64_t numel() const noexcept { return static_cast<int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  BasicTensor reshaped(Shape s) const {
    if (checked_numel(s) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return BasicTensor(std::move(s), data_);
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Contiguous slab of leading-dimension entries [begin, end).
  BasicTensor slice0(int64_t begin, int64_t end) const {
    if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end)
      throw RangeError("slice0 out of range");
    const int64_t inner = shape_[0] == 0 ? 0 : numel() / shape_[0];
    Shape s = shape_;
    s[0] = end - begin;
    return BasicTensor(std::move(s),
                       std::vector<T>(data_.begin() + begin * inner, data_.begin() + end * inner));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static int64_t checked_numel(const Shape& s) {
    for (int64_t d : s)
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    return shape_numel(s);
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Stacks equally-shaped tensors along a new leading dimension.
template <class T>
BasicTensor<T> stack(std::span<const BasicTensor<T>> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Shape s = items[0].shape();
  std::vector<T> data;
  data.reserve(static_cast<size_t>(items[0].numel()) * items.size());
  for (const auto& t : items) {
    if (t.shape() != s) throw ShapeError("stack: mismatched shapes");
    data.insert(data.end(), t.storage().begin(), t.storage().end());
  }
  s.insert(s.begin(), static_cast<int64_t>(items.size()));
  return BasicTensor<T>(std::move(s), std::move(data));
}

// Concatenates along the leading dimension.
template <class T>
BasicTensor<T> concat0(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() == 0) throw ShapeError("concat0: rank mismatch");
  for (int i = 1; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) throw ShapeError("concat0: trailing dims differ");
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<T> data(a.storage());
  data.insert(data.end(), b.storage().begin(), b.storage().end());
  return BasicTensor<T>(std::move(s), std::move(data));
}

}  // namespace ccm
