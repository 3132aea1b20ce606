/*
 * Copyright (c) 2026 The TACO Toolkit Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef TACO_MATRIX_HPP
#define TACO_MATRIX_HPP

#include "taco/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace taco
{

/// Row-major dense matrix. `Matrix<float>` is the storage type for weights and
/// activations; solvers promote to `Matrix<double>` internally.
template <typename T> class Matrix
{
public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{}) : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> values)
    : rows_(rows), cols_(cols), values_(std::move(values))
  {
    if (values_.size() != rows_ * cols_)
      throw ConfigError("matrix: " + std::to_string(values_.size()) + " values for shape " +
                        std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static Matrix identity(std::size_t n)
  {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      m(i, i) = T{1};
    return m;
  }

  static Matrix diagonal(std::span<const T> d)
  {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i)
      m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  T &operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols_ + c]; }
  const T &operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {values_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {values_.data() + r * cols_, cols_}; }

  std::vector<T> &values() noexcept { return values_; }
  const std::vector<T> &values() const noexcept { return values_; }

  template <typename U> Matrix<U> cast() const
  {
    std::vector<U> out(values_.size());
    std::transform(values_.begin(), values_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  Matrix transposed() const
  {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c)
        t(c, r) = (*this)(r, c);
    return t;
  }

  bool all_finite() const noexcept
  {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix &, const Matrix &) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> values_;
};

using DenseMatrix = Matrix<float>;
using MatrixD = Matrix<double>;

inline void require_same_shape(const auto &a, const auto &b, const char *what)
{
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ConfigError(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

/// C = A * B, accumulated in double.
template <typename T> Matrix<T> matmul(const Matrix<T> &a, const Matrix<T> &b)
{
  if (a.cols() != b.rows())
    throw ConfigError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " + std::to_string(b.rows()));
  Matrix<double> acc(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k)
    {
      const double aik = a(i, k);
      if (aik == 0.0)
        continue;
      auto brow = b.row(k);
      auto crow = acc.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j)
        crow[j] += aik * static_cast<double>(brow[j]);
    }
  if constexpr (std::is_same_v<T, double>)
    return acc;
  else
    return acc.template cast<T>();
}

template <typename T> double frobenius_norm(const Matrix<T> &a)
{
  double s = 0.0;
  for (T v : a.values())
    s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

template <typename T> double max_abs_diff(const Matrix<T> &a, const Matrix<T> &b)
{
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i])));
  return m;
}

namespace detail
{

inline void require_square(std::size_t r, std::size_t c, const char *what)
{
  if (r != c)
    throw ConfigError(std::string(what) + ": matrix is " + std::to_string(r) + "x" + std::to_string(c) +
                      ", expected square");
}

// In-place lower Cholesky on a double matrix; upper triangle is zeroed.
inline void cholesky_inplace(MatrixD &a)
{
  const std::size_t n = a.rows();
  for (std::size_t j = 0; j < n; ++j)
  {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k)
      d -= a(j, k) * a(j, k);
    if (!(d > 0.0) || !std::isfinite(d))
      throw NumericError("cholesky: matrix is not positive definite at pivot " + std::to_string(j));
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i)
    {
      double s = a(i, j);
      auto ri = a.row(i);
      auto rj = a.row(j);
      for (std::size_t k = 0; k < j; ++k)
        s -= ri[k] * rj[k];
      a(i, j) = s / ljj;
    }
    for (std::size_t k = j + 1; k < n; ++k)
      a(j, k) = 0.0;
  }
}

// Inverse of a lower-triangular matrix by forward substitution.
inline MatrixD lower_inverse(const MatrixD &l)
{
  const std::size_t n = l.rows();
  MatrixD inv(n, n);
  for (std::size_t c = 0; c < n; ++c)
  {
    inv(c, c) = 1.0 / l(c, c);
    for (std::size_t i = c + 1; i < n; ++i)
    {
      double s = 0.0;
      for (std::size_t k = c; k < i; ++k)
        s += l(i, k) * inv(k, c);
      inv(i, c) = -s / l(i, i);
    }
  }
  return inv;
}

} // namespace detail

/// Lower-triangular L with L * L^T = A. Computed in double. Throws NumericError
/// naming the first non-positive pivot; never regularizes.
template <typename T> Matrix<T> cholesky(const Matrix<T> &a)
{
  detail::require_square(a.rows(), a.cols(), "cholesky");
  MatrixD l = a.template cast<double>();
  detail::cholesky_inplace(l);
  if constexpr (std::is_same_v<T, double>)
    return l;
  else
    return l.template cast<T>();
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
template <typename T> Matrix<T> inv_spd(const Matrix<T> &a)
{
  detail::require_square(a.rows(), a.cols(), "inv_spd");
  MatrixD l = a.template cast<double>();
  detail::cholesky_inplace(l);
  const MatrixD li = detail::lower_inverse(l);
  const std::size_t n = a.rows();
  // A^-1 = L^-T L^-1
  MatrixD inv(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
    {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k)
        s += li(k, i) * li(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  if constexpr (std::is_same_v<T, double>)
    return inv;
  else
    return inv.template cast<T>();
}

/// Upper-triangular U with U^T * U = A^-1. This is the factor the OBS-style
/// solvers sweep column by column: U(j, j)^2 is the inverse-Hessian diagonal
/// once columns 0..j-1 have been eliminated.
inline MatrixD upper_cholesky_of_inverse(const MatrixD &a)
{
  return cholesky(inv_spd(a)).transposed();
}

} // namespace taco

#endif // TACO_MATRIX_HPP
