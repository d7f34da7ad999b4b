// Copyright 2026 The FBQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small deterministic dense linear algebra. Every dot product accumulates in
// ascending index order so that repeated runs are bit-identical.

#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fbquant/errors.hpp"

namespace fbq {

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  template <typename U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixD = Matrix<double>;
using MatrixF = Matrix<float>;

namespace detail {

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                     " vs " + shape_str(b.rows(), b.cols()));
  }
}

}  // namespace detail

/// Product a·b. For each output element the sum runs over the inner index in
/// ascending order.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimension mismatch " +
                     detail::shape_str(a.rows(), a.cols()) + " x " +
                     detail::shape_str(b.rows(), b.cols()));
  }
  Matrix<T> c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* ci = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const T* bk = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// Product a·bᵀ without materializing the transpose.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimension mismatch " +
                     detail::shape_str(a.rows(), a.cols()) + " x " +
                     detail::shape_str(b.cols(), b.rows()));
  }
  Matrix<T> c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ai = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* bj = b.row(j).data();
      T acc{};
      for (std::size_t k = 0; k < a.cols(); ++k) acc += ai[k] * bj[k];
      c(i, j) = acc;
    }
  }
  return c;
}

template <typename T>
Matrix<T> operator+(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape(a, b, "add");
  Matrix<T> c = a;
  auto cv = c.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] += bv[i];
  return c;
}

template <typename T>
Matrix<T> operator-(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Matrix<T> c = a;
  auto cv = c.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] -= bv[i];
  return c;
}

template <typename T>
Matrix<T> operator*(T s, const Matrix<T>& a) {
  Matrix<T> c = a;
  for (T& v : c.values()) v *= s;
  return c;
}

// y += alpha * x
template <typename T>
void axpy(T alpha, const Matrix<T>& x, Matrix<T>& y) {
  detail::require_same_shape(x, y, "axpy");
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += alpha * xv[i];
}

/// Sum of squared entries.
template <typename T>
T frobenius_sq(const Matrix<T>& a) {
  T acc{};
  for (T v : a.values()) acc += v * v;
  return acc;
}

template <typename T>
T trace(const Matrix<T>& a) {
  if (a.rows() != a.cols()) throw ShapeError("trace: matrix is not square");
  T acc{};
  for (std::size_t i = 0; i < a.rows(); ++i) acc += a(i, i);
  return acc;
}

template <typename T>
T max_abs(const Matrix<T>& a) {
  T m{};
  for (T v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

/// XᵀX for samples-by-features X, made exactly symmetric by averaging with its
/// transpose.
template <typename T>
Matrix<T> gram(const Matrix<T>& x) {
  const std::size_t d = x.cols();
  Matrix<T> g(d, d);
  for (std::size_t s = 0; s < x.rows(); ++s) {
    const T* xs = x.row(s).data();
    for (std::size_t i = 0; i < d; ++i) {
      const T xi = xs[i];
      T* gi = g.row(i).data();
      for (std::size_t j = 0; j < d; ++j) gi[j] += xi * xs[j];
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j) {
      const T avg = (g(i, j) + g(j, i)) / T{2};
      g(i, j) = avg;
      g(j, i) = avg;
    }
  }
  return g;
}

struct SvdResult {
  MatrixD u;              // m x k, orthonormal columns
  std::vector<double> s;  // k values, descending, non-negative
  MatrixD v;              // k x n, orthonormal rows
};

inline constexpr double kDefaultSvdTol = 1e-15;
inline constexpr double kDefaultNullTol = 1e-10;

/// Top-k singular triplets of `a` by one-sided Jacobi rotations applied to
/// the smaller dimension. Throws ConvergenceError past the sweep cap.
SvdResult truncated_svd(const MatrixD& a, std::size_t k, double tol = kDefaultSvdTol);

/// U·diag(s)·V for a (possibly truncated) decomposition.
MatrixD svd_reconstruct(const SvdResult& svd);

/// Orthonormal rows spanning the numerical null space of XᵀX: eigenvectors
/// whose eigenvalue is at most tol times the largest. Returns a q x d matrix,
/// possibly with q == 0.
MatrixD gram_null_basis(const MatrixD& x, double tol = kDefaultNullTol);

/// Modified Gram–Schmidt over the rows of `m`. Rows that become numerically
/// dependent on earlier ones are set to zero.
MatrixD orthonormalize_rows(const MatrixD& m, double drop_tol = 1e-12);

}  // namespace fbq
