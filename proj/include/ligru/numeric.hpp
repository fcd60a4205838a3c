// SPDX-License-Identifier: Apache-2.0
/**
 * @file   numeric.hpp
 * @brief  Dense row-major matrix, elementwise maps and deterministic products.
 *
 * All products accumulate sequentially over the inner dimension, so a given
 * input always produces bit-identical output regardless of call site.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ligru {

/// Thrown when a caller breaks an operation's precondition (shape, range).
class ContractViolation : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation produces or meets a non-finite value.
class ComputeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

template <class T> class Matrix {
public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ContractViolation("Matrix: data length " +
                              std::to_string(data_.size()) + " != " +
                              std::to_string(rows_) + "x" +
                              std::to_string(cols_));
  }
  Matrix(std::initializer_list<std::initializer_list<T>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto &row : init) {
      if (row.size() != cols_)
        throw ContractViolation("Matrix: ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T &operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols_ + c];
  }
  const T &operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }
  T &operator[](std::size_t i) noexcept { return data_[i]; }
  const T &operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  T *data() noexcept { return data_.data(); }
  const T *data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  std::string shape() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool same_shape(const Matrix &o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  friend bool operator==(const Matrix &a, const Matrix &b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  Matrix &operator+=(const Matrix &o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i)
      data_[i] += o.data_[i];
    return *this;
  }
  Matrix &operator-=(const Matrix &o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i)
      data_[i] -= o.data_[i];
    return *this;
  }
  Matrix &operator*=(T s) {
    for (auto &v : data_)
      v *= s;
    return *this;
  }

private:
  void require_same(const Matrix &o, const char *what) const {
    if (!same_shape(o))
      throw ContractViolation(std::string("Matrix ") + what +
                              ": shape mismatch " + shape() + " vs " +
                              o.shape());
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <class T> Matrix<T> operator+(Matrix<T> a, const Matrix<T> &b) {
  a += b;
  return a;
}
template <class T> Matrix<T> operator-(Matrix<T> a, const Matrix<T> &b) {
  a -= b;
  return a;
}

template <class U, class T> Matrix<U> matrix_cast(const Matrix<T> &m) {
  Matrix<U> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i)
    out[i] = static_cast<U>(m[i]);
  return out;
}

template <class T> Matrix<T> transpose(const Matrix<T> &a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      out(j, i) = a(i, j);
  return out;
}

namespace detail {
inline std::string shape_pair(const char *op, std::size_t ar, std::size_t ac,
                              std::size_t br, std::size_t bc) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << ar << "x" << ac << " and " << br
     << "x" << bc;
  return os.str();
}
} // namespace detail

/// c += a * b. Each entry of c accumulates a(i,k)*b(k,j) in increasing k.
template <class T>
void matmul_acc(Matrix<T> &c, const Matrix<T> &a, const Matrix<T> &b) {
  if (a.cols() != b.rows() || c.rows() != a.rows() || c.cols() != b.cols())
    throw ContractViolation(
        detail::shape_pair("matmul", a.rows(), a.cols(), b.rows(), b.cols()));
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T *ci = c.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const T *bk = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j)
        ci[j] += aik * bk[j];
    }
  }
}

template <class T> Matrix<T> matmul(const Matrix<T> &a, const Matrix<T> &b) {
  if (a.cols() != b.rows())
    throw ContractViolation(
        detail::shape_pair("matmul", a.rows(), a.cols(), b.rows(), b.cols()));
  Matrix<T> c(a.rows(), b.cols());
  matmul_acc(c, a, b);
  return c;
}

/// c += aᵀ * b, with a given as k×m and b as k×n.
template <class T>
void matmul_tn_acc(Matrix<T> &c, const Matrix<T> &a, const Matrix<T> &b) {
  if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols())
    throw ContractViolation(detail::shape_pair("matmul_tn", a.cols(), a.rows(),
                                               b.rows(), b.cols()));
  const std::size_t m = a.cols();
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T *ak = a.data() + k * m;
    const T *bk = b.data() + k * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T aki = ak[i];
      if (aki == T(0))
        continue;
      T *ci = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j)
        ci[j] += aki * bk[j];
    }
  }
}

/// c += a * bᵀ, with a given as m×k and b as n×k.
template <class T>
void matmul_nt_acc(Matrix<T> &c, const Matrix<T> &a, const Matrix<T> &b) {
  if (a.cols() != b.cols() || c.rows() != a.rows() || c.cols() != b.rows())
    throw ContractViolation(detail::shape_pair("matmul_nt", a.rows(), a.cols(),
                                               b.cols(), b.rows()));
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T *ai = a.data() + i * k;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T *bj = b.data() + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p)
        s += ai[p] * bj[p];
      c(i, j) += s;
    }
  }
}

// Scalar activations. σ and tanh are clamped to the open intervals (0,1) and
// (-1,1) so gate values never saturate to exactly 0 or 1.
template <class T> T sigmoid(T v) {
  T s;
  if (v >= T(0)) {
    s = T(1) / (T(1) + std::exp(-v));
  } else {
    const T e = std::exp(v);
    s = e / (T(1) + e);
  }
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  return std::clamp(s, std::numeric_limits<T>::min(), hi);
}

template <class T> T tanh_open(T v) {
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  return std::clamp(std::tanh(v), -hi, hi);
}

template <class T> T relu(T v) { return v > T(0) ? v : T(0); }

enum class Op { sigmoid, tanh, relu, mul, add };

template <class T> Matrix<T> elementwise(Op op, const Matrix<T> &a) {
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    switch (op) {
    case Op::sigmoid: out[i] = sigmoid(a[i]); break;
    case Op::tanh: out[i] = tanh_open(a[i]); break;
    case Op::relu: out[i] = relu(a[i]); break;
    default: throw ContractViolation("elementwise: binary op needs two operands");
    }
  }
  return out;
}

template <class T>
Matrix<T> elementwise(Op op, const Matrix<T> &a, const Matrix<T> &b) {
  if (!a.same_shape(b))
    throw ContractViolation("elementwise: shape mismatch " + a.shape() +
                            " vs " + b.shape());
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    switch (op) {
    case Op::mul: out[i] = a[i] * b[i]; break;
    case Op::add: out[i] = a[i] + b[i]; break;
    default: throw ContractViolation("elementwise: unary op given two operands");
    }
  }
  return out;
}

template <class T> T squared_norm(const Matrix<T> &m) {
  T s = T(0);
  for (T v : m.values())
    s += v * v;
  return s;
}

template <class T> bool all_finite(const Matrix<T> &m) {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](T v) { return std::isfinite(v); });
}

/// Sum over rows, producing a 1×cols matrix.
template <class T> Matrix<T> column_sums(const Matrix<T> &m) {
  Matrix<T> out(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      out[j] += m(i, j);
  return out;
}

/// Adds a 1×cols row vector to every row.
template <class T> void add_row_vector(Matrix<T> &m, const Matrix<T> &v) {
  if (v.rows() != 1 || v.cols() != m.cols())
    throw ContractViolation("add_row_vector: " + v.shape() + " onto " +
                            m.shape());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      m(i, j) += v[j];
}

} // namespace ligru
