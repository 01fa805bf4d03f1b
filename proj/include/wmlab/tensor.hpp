#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace wmlab {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Per-sample feature shape. Flat features are channels x 1 x 1.
struct Shape {
  int channels = 0;
  int height = 1;
  int width = 1;

  int spatial() const { return height * width; }
  int size() const { return channels * height * width; }
  bool flat() const { return height == 1 && width == 1; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
  }
};

/// A batch of feature maps.
///
/// Storage is a channels x (batch * height * width) matrix: column
/// n*H*W + y*W + x holds the channel vector of sample n at pixel (y, x).
/// With this layout a convolution is a single GEMM over im2col columns and
/// flattening a sample is a reshape of its contiguous column block.
template <typename Scalar>
struct Tensor {
  Shape shape;
  int batch = 0;
  Matrix<Scalar> data;

  Tensor() = default;
  Tensor(Shape s, int n) : shape(s), batch(n), data(Matrix<Scalar>::Zero(s.channels, static_cast<Eigen::Index>(n) * s.spatial())) {}
  Tensor(Shape s, int n, Matrix<Scalar> values) : shape(s), batch(n), data(std::move(values)) {
    if (data.rows() != s.channels || data.cols() != static_cast<Eigen::Index>(n) * s.spatial())
      throw std::invalid_argument("tensor storage does not match shape " + s.str());
  }

  auto sample(int n) { return data.middleCols(static_cast<Eigen::Index>(n) * shape.spatial(), shape.spatial()); }
  auto sample(int n) const { return data.middleCols(static_cast<Eigen::Index>(n) * shape.spatial(), shape.spatial()); }

  /// Per-sample flat view: column n holds sample n's shape.size() values.
  Eigen::Map<Matrix<Scalar>> flat_view() { return {data.data(), shape.size(), batch}; }
  Eigen::Map<const Matrix<Scalar>> flat_view() const { return {data.data(), shape.size(), batch}; }

  /// Samples [first, first + count).
  Tensor slice(int first, int count) const {
    return Tensor(shape, count, data.middleCols(static_cast<Eigen::Index>(first) * shape.spatial(),
                                                static_cast<Eigen::Index>(count) * shape.spatial()));
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, batch, data.template cast<Other>());
  }
};

/// Flattened values of sample n in storage order (position-major, channel-minor).
template <typename Scalar>
Eigen::Map<const Vector<Scalar>> sample_values(const Tensor<Scalar>& t, int n) {
  return {t.data.data() + static_cast<std::ptrdiff_t>(n) * t.shape.size(), t.shape.size()};
}

/// Column-wise softmax with max subtraction.
template <typename Derived>
Matrix<typename Derived::Scalar> softmax_columns(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const Scalar peak = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - peak).exp().matrix();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

/// Column-wise log-softmax.
template <typename Derived>
Matrix<typename Derived::Scalar> log_softmax_columns(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const Scalar peak = logits.col(j).maxCoeff();
    const Scalar lse = peak + std::log((logits.col(j).array() - peak).exp().sum());
    out.col(j) = logits.col(j).array() - lse;
  }
  return out;
}

/// Index of the largest of the first `limit` rows of column j (ties -> lowest index).
template <typename Derived>
int argmax_column(const Eigen::MatrixBase<Derived>& m, Eigen::Index j, Eigen::Index limit = -1) {
  const Eigen::Index rows = limit < 0 ? m.rows() : std::min(limit, m.rows());
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < rows; ++i)
    if (m(i, j) > m(best, j)) best = i;
  return static_cast<int>(best);
}

}  // namespace wmlab
