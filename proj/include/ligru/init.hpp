// SPDX-License-Identifier: Apache-2.0
/**
 * @file   init.hpp
 * @brief  Glorot-uniform and orthogonal weight initializers.
 */
#pragma once

#include <cmath>
#include <cstddef>

#include "numeric.hpp"
#include "rng.hpp"

namespace ligru {

/// Uniform on [-L, L] with L = sqrt(6 / (rows + cols)).
template <class T = double>
Matrix<T> glorot_init(std::size_t rows, std::size_t cols, RngStream &rng) {
  if (rows == 0 || cols == 0)
    throw ContractViolation("glorot_init: zero dimension " +
                            std::to_string(rows) + "x" + std::to_string(cols));
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix<T> m(rows, cols);
  for (auto &v : m.values())
    v = static_cast<T>(limit * (2.0 * rng.uniform() - 1.0));
  return m;
}

/// Square orthogonal matrix: Householder QR of a Gaussian matrix, with the
/// columns of Q sign-corrected so that R has a positive diagonal.
template <class T = double>
Matrix<T> orthogonal_init(std::size_t n, RngStream &rng) {
  if (n == 0)
    throw ContractViolation("orthogonal_init: n must be >= 1");
  Matrix<double> a(n, n);
  for (auto &v : a.values())
    v = rng.normal();

  // Householder vectors are stored below (and on) the diagonal of `vs`.
  Matrix<double> vs(n, n);
  std::vector<double> diag(n);
  for (std::size_t k = 0; k < n; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < n; ++i)
      norm += a(i, k) * a(i, k);
    norm = std::sqrt(norm);
    const double alpha = a(k, k) >= 0.0 ? -norm : norm;
    diag[k] = alpha;

    double vnorm = 0.0;
    for (std::size_t i = k; i < n; ++i) {
      vs(i, k) = a(i, k) - (i == k ? alpha : 0.0);
      vnorm += vs(i, k) * vs(i, k);
    }
    vnorm = std::sqrt(vnorm);
    if (vnorm == 0.0)
      continue;
    for (std::size_t i = k; i < n; ++i)
      vs(i, k) /= vnorm;

    for (std::size_t j = k; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < n; ++i)
        dot += vs(i, k) * a(i, j);
      for (std::size_t i = k; i < n; ++i)
        a(i, j) -= 2.0 * vs(i, k) * dot;
    }
  }

  // Q = H_0 H_1 ... H_{n-1} applied to the identity, right to left.
  Matrix<double> q = Matrix<double>::identity(n);
  for (std::size_t kk = n; kk-- > 0;) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = kk; i < n; ++i)
        dot += vs(i, kk) * q(i, j);
      for (std::size_t i = kk; i < n; ++i)
        q(i, j) -= 2.0 * vs(i, kk) * dot;
    }
  }

  Matrix<T> out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = static_cast<T>(diag[j] < 0.0 ? -q(i, j) : q(i, j));
  return out;
}

} // namespace ligru
