// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense row-major tensor backed by an Eigen matrix.
 *
 * A tensor of shape [d0, ..., dn-1] is stored as a (d0*...*dn-2) x dn-1
 * row-major matrix, so every op that works "along the last axis" is a
 * row-wise Eigen expression.
 */
#ifndef CTCD_TENSOR_HPP
#define CTCD_TENSOR_HPP

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctcd {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shapeToString(const Shape &shape);
Index shapeSize(const Shape &shape);

template <typename Scalar>
class Tensor {
 public:
  Tensor() : shape_{1}, data_(Matrix<Scalar>::Zero(1, 1)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate();
    data_ = Matrix<Scalar>::Zero(leadingSize(), shape_.back());
  }

  Tensor(Shape shape, Matrix<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
    if (data_.rows() != leadingSize() || data_.cols() != shape_.back())
      throw std::invalid_argument("tensor data does not match shape " + shapeToString(shape_));
  }

  static Tensor scalar(Scalar value) {
    Tensor t(Shape{1});
    t.data_(0, 0) = value;
    return t;
  }

  static Tensor fromValues(Shape shape, const std::vector<Scalar> &values) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(values.size()) != t.size())
      throw std::invalid_argument("value count does not match shape " + shapeToString(t.shape_));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  const Shape &shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index rows() const { return data_.rows(); }
  Index cols() const { return data_.cols(); }

  Matrix<Scalar> &matrix() { return data_; }
  const Matrix<Scalar> &matrix() const { return data_; }
  Scalar *data() { return data_.data(); }
  const Scalar *data() const { return data_.data(); }

  Scalar &operator[](Index i) { return data_.data()[i]; }
  Scalar operator[](Index i) const { return data_.data()[i]; }

  /// Value of a single-element tensor.
  Scalar item() const {
    if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shapeToString(shape_));
    return data_(0, 0);
  }

  bool allFinite() const { return data_.allFinite(); }

  /// Same elements under a new shape with an equal element count.
  Tensor reshaped(Shape shape) const {
    if (shapeSize(shape) != size())
      throw std::invalid_argument("cannot reshape " + shapeToString(shape_) + " to " + shapeToString(shape));
    const Index cols = shape.back();
    Matrix<Scalar> m = Eigen::Map<const Matrix<Scalar>>(data(), size() / cols, cols);
    return Tensor(std::move(shape), std::move(m));
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  friend bool operator==(const Tensor &a, const Tensor &b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate() const {
    if (shape_.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
    for (Index d : shape_)
      if (d < 1) throw std::invalid_argument("tensor dimensions must be >= 1, got " + shapeToString(shape_));
  }
  Index leadingSize() const {
    Index n = 1;
    for (std::size_t i = 0; i + 1 < shape_.size(); ++i) n *= shape_[i];
    return n;
  }

  Shape shape_;
  Matrix<Scalar> data_;
};

}  // namespace ctcd

#endif  // CTCD_TENSOR_HPP
