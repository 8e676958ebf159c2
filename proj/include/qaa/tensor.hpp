#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qaa/error.hpp"

namespace qaa {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major (C order) n-dimensional array. Storage is a contiguous
/// Eigen column vector so that element-wise work goes through Eigen arrays
/// and reshaped views through Eigen::Map.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(shape_size(shape_))) {
    check_dims();
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_))
      throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string(shape_));
  }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    Vector v(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar s : values) v[i++] = s;
    return Tensor(std::move(shape), std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.size() == 0; }

  /// Leading dimension; every batched tensor in this library is [N, ...].
  Index batch() const { return shape_.empty() ? 0 : shape_[0]; }
  Index per_example() const { return batch() == 0 ? 0 : size() / batch(); }

  Vector& data() noexcept { return data_; }
  const Vector& data() const noexcept { return data_; }
  Scalar* ptr() noexcept { return data_.data(); }
  const Scalar* ptr() const noexcept { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  auto array() { return data_.array(); }
  auto array() const { return data_.array(); }

  /// Row-major [rows, cols] view over the storage.
  MatrixMap matrix(Index rows, Index cols) { return MatrixMap(data_.data(), rows, cols); }
  ConstMatrixMap matrix(Index rows, Index cols) const { return ConstMatrixMap(data_.data(), rows, cols); }

  /// [N, per_example] view.
  MatrixMap rows() { return matrix(batch(), per_example()); }
  ConstMatrixMap rows() const { return matrix(batch(), per_example()); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ValidationError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  /// Copy of examples [begin, end) along the leading dimension.
  Tensor slice(Index begin, Index end) const {
    const Index stride = per_example();
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), data_.segment(begin * stride, (end - begin) * stride));
  }

  /// Copy of the listed examples along the leading dimension, in order.
  Tensor gather(const std::vector<Index>& idx) const {
    const Index stride = per_example();
    Shape s = shape_;
    s[0] = static_cast<Index>(idx.size());
    Tensor out(std::move(s));
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.data_.segment(static_cast<Index>(i) * stride, stride) = data_.segment(idx[i] * stride, stride);
    return out;
  }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, data_.template cast<To>());
  }

  bool all_finite() const { return data_.allFinite(); }

  void require_finite(const std::string& where) const {
    if (!all_finite()) throw NumericFault("non-finite value in " + where);
  }

  bool operator==(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    // Bitwise comparison semantics for finite data; NaN never compares equal.
    return (data_.array() == o.data_.array()).all();
  }
  bool operator!=(const Tensor& o) const { return !(*this == o); }

 private:
  void check_dims() const {
    for (Index d : shape_)
      if (d <= 0) throw ValidationError("tensor dimensions must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  Vector data_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace qaa
