// Independent reference computations for tests (Eigen-backed).
#pragma once

#include <Eigen/Dense>

#include "linalg.hpp"

namespace oracle {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Mat to_eigen(const d2lora::Matrix& m) {
  Mat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline d2lora::Matrix from_eigen(const Mat& m) {
  d2lora::Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline double max_abs_diff(const d2lora::Matrix& a, const Mat& b) {
  return (to_eigen(a) - b).cwiseAbs().maxCoeff();
}

inline double max_abs_diff(const d2lora::Matrix& a, const d2lora::Matrix& b) {
  return (to_eigen(a) - to_eigen(b)).cwiseAbs().maxCoeff();
}

inline Eigen::VectorXd singular_values(const d2lora::Matrix& m) {
  return Eigen::JacobiSVD<Mat>(to_eigen(m)).singularValues();
}

// W* = (W0 + dW) diag(m / max(d, eps)) in the W orientation.
inline Mat project(const Mat& w0, const Mat& dw, double eps) {
  Mat u = w0 + dw;
  Mat out = u;
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    const double d = u.col(j).norm();
    out.col(j) *= w0.col(j).norm() / std::max(d, eps);
  }
  return out;
}

}  // namespace oracle
