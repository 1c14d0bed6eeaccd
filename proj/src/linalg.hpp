// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "rng.hpp"

namespace d2lora {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
///
/// Zero-sized matrices are allowed so that a disabled low-rank branch
/// (rank 0) can be represented without special cases.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v);

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

/// A * B. Throws ShapeError when A.cols != B.rows.
Matrix matmul(const Matrix& a, const Matrix& b);
/// A^T * B without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// A * B^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);
Matrix hadamard(const Matrix& a, const Matrix& b);

/// Frobenius inner product <A, B>.
double inner(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& m);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

/// Euclidean norm of every column; length M.cols.
Vector column_norms(const Matrix& m);
/// Euclidean norm of every row; length M.rows.
Vector row_norms(const Matrix& m);

/// Adds `bias` to every row of `m`.
void add_row_vector(Matrix& m, std::span<const double> bias);

/// Singular values in descending order (one-sided Jacobi).
Vector singular_values(const Matrix& m);

/// Number of singular values strictly above tol * sigma_max; 0 for the
/// zero matrix.
std::size_t numerical_rank(const Matrix& m, double tol);

/// i.i.d. N(0, std^2) entries, row-major, from Rng(seed).
Matrix seeded_gaussian(std::size_t rows, std::size_t cols, double std, std::uint64_t seed);
/// Same fill order, drawing from an existing stream.
Matrix gaussian(std::size_t rows, std::size_t cols, double std, Rng& rng);

void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

}  // namespace d2lora
