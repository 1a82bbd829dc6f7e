#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pbs/errors.hpp"

namespace pbs {

template <std::floating_point T>
constexpr T neg_inf() {
  return -std::numeric_limits<T>::infinity();
}

/// Dense row-major matrix, the carrier for queries, keys, values, outputs and
/// score matrices. Element type is float or double, chosen per run.
template <std::floating_point T>
class Matrix {
public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
    std::size_t r = 0;
    for (const auto& row : rows) {
      if (row.size() != m.cols_) throw ShapeError("from_rows: ragged initializer");
      std::copy(row.begin(), row.end(), m.row(r).begin());
      ++r;
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  /// Index of the first non-finite element, if any.
  std::optional<std::size_t> first_nonfinite() const {
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!std::isfinite(data_[i])) return i;
    return std::nullopt;
  }

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// a[n x d] * b[m x d]^T -> [n x m]; out(i,j) = dot(a.row(i), b.row(j)).
template <std::floating_point T>
Matrix<T> matmul_transposed(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_transposed: inner dimensions differ (" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.cols()) + ")");
  Matrix<T> out(a.rows(), b.rows());
  const std::size_t d = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ai = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* bj = b.row(j).data();
      T acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += ai[c] * bj[c];
      out(i, j) = acc;
    }
  }
  return out;
}

/// a[n x m] * b[m x d] -> [n x d].
template <std::floating_point T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + ")");
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t m = a.cols(), d = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* oi = out.row(i).data();
    for (std::size_t k = 0; k < m; ++k) {
      const T aik = a(i, k);
      if (aik == T(0)) continue;
      const T* bk = b.row(k).data();
      for (std::size_t c = 0; c < d; ++c) oi[c] += aik * bk[c];
    }
  }
  return out;
}

/// Row-wise softmax, stabilized by row-max subtraction. `mask`, when given,
/// is an additive mask of the same shape with entries in {0, -inf}; -inf
/// entries are excluded. A fully masked row comes back as all zeros.
template <std::floating_point T>
Matrix<T> softmax_rows(const Matrix<T>& m, const Matrix<T>* mask = nullptr) {
  if (mask && !mask->same_shape(m))
    throw ShapeError("softmax_rows: mask shape differs from input");
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    T mx = neg_inf<T>();
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const T v = mask ? m(r, c) + (*mask)(r, c) : m(r, c);
      mx = std::max(mx, v);
    }
    if (mx == neg_inf<T>()) continue;  // fully masked row stays zero
    T denom = 0;
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const T v = mask ? m(r, c) + (*mask)(r, c) : m(r, c);
      const T e = v == neg_inf<T>() ? T(0) : std::exp(v - mx);
      out(r, c) = e;
      denom += e;
    }
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) /= denom;
  }
  return out;
}

template <std::floating_point T>
Matrix<T> softmax_rows(const Matrix<T>& m, const Matrix<T>& mask) {
  return softmax_rows(m, &mask);
}

template <std::floating_point T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shapes differ");
  double mx = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    mx = std::max(mx, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return mx;
}

template <std::floating_point T>
double mean_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("mean_abs_diff: shapes differ");
  if (a.size() == 0) return 0;
  double sum = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    sum += std::abs(double(a.data()[i]) - double(b.data()[i]));
  return sum / double(a.size());
}

}  // namespace pbs
