#pragma once

#include <concepts>
#include <cstddef>
#include <utility>

#include <Eigen/Dense>

#include "hesslens/errors.hpp"

namespace hesslens {

/// A square, matrix-free linear map on R^dim.
template <class Op>
concept LinearOperator = requires(const Op& op, const Eigen::VectorXd& v) {
  { op.dim() } -> std::convertible_to<std::size_t>;
  { op.apply(v) } -> std::convertible_to<Eigen::VectorXd>;
};

/// Explicit matrix viewed as an operator.
class DenseOperator {
 public:
  explicit DenseOperator(Eigen::MatrixXd m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols()) throw DimensionError("dense operator must be square");
  }

  static DenseOperator diagonal(const Eigen::VectorXd& d) { return DenseOperator(d.asDiagonal().toDenseMatrix()); }
  static DenseOperator identity(std::size_t n) {
    return DenseOperator(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
  }

  std::size_t dim() const { return static_cast<std::size_t>(m_.rows()); }
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    if (v.size() != m_.cols()) throw DimensionError("dense operator: dimension mismatch");
    return m_ * v;
  }
  const Eigen::MatrixXd& matrix() const { return m_; }

 private:
  Eigen::MatrixXd m_;
};

/// (op - shift I) / scale.
template <LinearOperator Op>
class AffineOperator {
 public:
  AffineOperator(const Op& op, double scale, double shift) : op_(&op), scale_(scale), shift_(shift) {}

  std::size_t dim() const { return op_->dim(); }
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return (op_->apply(v) - shift_ * v) / scale_; }

 private:
  const Op* op_;
  double scale_;
  double shift_;
};

}  // namespace hesslens
