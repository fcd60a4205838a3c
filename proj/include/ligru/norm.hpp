// SPDX-License-Identifier: Apache-2.0
/**
 * @file   norm.hpp
 * @brief  Batch normalization over valid frames, time-shared dropout masks
 *         and Gaussian weight noise.
 */
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "numeric.hpp"
#include "rng.hpp"

namespace ligru {

enum class Mode { train, eval };

template <class T> struct BatchNormState {
  Matrix<T> gamma;
  Matrix<T> beta;
  Matrix<T> running_mean;
  Matrix<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.9);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t n, T gamma_init = T(0.1))
      : gamma(1, n, gamma_init), beta(1, n), running_mean(1, n),
        running_var(1, n, T(1)) {}

  std::size_t features() const noexcept { return gamma.cols(); }
};

/// Row mask: nonzero entries mark valid frames. Empty means all valid.
using RowMask = std::span<const std::uint8_t>;

template <class T> struct BnCache {
  Mode mode = Mode::train;
  Matrix<T> xhat;    // normalized input, zero on masked rows
  Matrix<T> inv_std; // 1×n
  std::vector<std::uint8_t> valid;
  std::size_t count = 0;
};

namespace detail {
inline bool row_valid(RowMask mask, std::size_t r) {
  return mask.empty() || mask[r] != 0;
}
} // namespace detail

/// out = γ ⊙ (a − μ) / sqrt(σ² + ε) + β per feature column. Train mode uses
/// biased statistics over the valid rows and updates the running averages;
/// eval mode uses the running averages. Masked rows come out as zero.
template <class T>
Matrix<T> bn_forward(const Matrix<T> &pre, BatchNormState<T> &state, Mode mode,
                     BnCache<T> *cache = nullptr, RowMask mask = {}) {
  const std::size_t n = pre.cols();
  if (n != state.features())
    throw ContractViolation("bn_forward: " + std::to_string(n) +
                            " features, state has " +
                            std::to_string(state.features()));
  if (!mask.empty() && mask.size() != pre.rows())
    throw ContractViolation("bn_forward: mask length mismatch");

  std::size_t count = 0;
  for (std::size_t r = 0; r < pre.rows(); ++r) {
    if (!detail::row_valid(mask, r))
      continue;
    ++count;
    for (T v : pre.row(r))
      if (!std::isfinite(v))
        throw ComputeError("bn_forward: non-finite pre-activation at row " +
                           std::to_string(r));
  }

  Matrix<T> mean(1, n), var(1, n);
  if (mode == Mode::train) {
    if (count < 2)
      throw ContractViolation("bn_forward: train mode needs >= 2 valid frames, "
                              "got " + std::to_string(count));
    for (std::size_t r = 0; r < pre.rows(); ++r)
      if (detail::row_valid(mask, r))
        for (std::size_t j = 0; j < n; ++j)
          mean[j] += pre(r, j);
    for (std::size_t j = 0; j < n; ++j)
      mean[j] /= static_cast<T>(count);
    for (std::size_t r = 0; r < pre.rows(); ++r)
      if (detail::row_valid(mask, r))
        for (std::size_t j = 0; j < n; ++j) {
          const T d = pre(r, j) - mean[j];
          var[j] += d * d;
        }
    for (std::size_t j = 0; j < n; ++j) {
      var[j] /= static_cast<T>(count);
      state.running_mean[j] = state.momentum * state.running_mean[j] +
                              (T(1) - state.momentum) * mean[j];
      state.running_var[j] = state.momentum * state.running_var[j] +
                             (T(1) - state.momentum) * var[j];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  Matrix<T> inv_std(1, n);
  for (std::size_t j = 0; j < n; ++j)
    inv_std[j] = T(1) / std::sqrt(var[j] + state.eps);

  Matrix<T> out(pre.rows(), n);
  Matrix<T> xhat(pre.rows(), n);
  for (std::size_t r = 0; r < pre.rows(); ++r) {
    if (!detail::row_valid(mask, r))
      continue;
    for (std::size_t j = 0; j < n; ++j) {
      const T x = (pre(r, j) - mean[j]) * inv_std[j];
      xhat(r, j) = x;
      out(r, j) = state.gamma[j] * x + state.beta[j];
    }
  }

  if (cache) {
    cache->mode = mode;
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->valid.assign(mask.begin(), mask.end());
    cache->count = count;
  }
  return out;
}

template <class T> struct BnGrads {
  Matrix<T> d_pre;
  Matrix<T> d_gamma;
  Matrix<T> d_beta;
};

/// Exact gradients of bn_forward, including the dependence of the batch
/// statistics on every valid input row in train mode.
template <class T>
BnGrads<T> bn_backward(const BnCache<T> &cache, const BatchNormState<T> &state,
                       const Matrix<T> &upstream) {
  const std::size_t n = state.features();
  if (!upstream.same_shape(cache.xhat))
    throw ContractViolation("bn_backward: upstream " + upstream.shape() +
                            " does not match cache " + cache.xhat.shape());
  const RowMask mask(cache.valid);

  BnGrads<T> g{Matrix<T>(upstream.rows(), n), Matrix<T>(1, n),
               Matrix<T>(1, n)};
  Matrix<T> sum_dxhat(1, n), sum_dxhat_xhat(1, n);
  for (std::size_t r = 0; r < upstream.rows(); ++r) {
    if (!detail::row_valid(mask, r))
      continue;
    for (std::size_t j = 0; j < n; ++j) {
      const T dy = upstream(r, j);
      const T xh = cache.xhat(r, j);
      g.d_beta[j] += dy;
      g.d_gamma[j] += dy * xh;
      const T dxh = dy * state.gamma[j];
      sum_dxhat[j] += dxh;
      sum_dxhat_xhat[j] += dxh * xh;
    }
  }

  const T count = static_cast<T>(cache.count);
  for (std::size_t r = 0; r < upstream.rows(); ++r) {
    if (!detail::row_valid(mask, r))
      continue;
    for (std::size_t j = 0; j < n; ++j) {
      const T dxh = upstream(r, j) * state.gamma[j];
      if (cache.mode == Mode::train) {
        g.d_pre(r, j) = cache.inv_std[j] / count *
                        (count * dxh - sum_dxhat[j] -
                         cache.xhat(r, j) * sum_dxhat_xhat[j]);
      } else {
        g.d_pre(r, j) = dxh * cache.inv_std[j];
      }
    }
  }
  return g;
}

/// One Bernoulli keep-mask per (sequence, unit), reused at every timestep.
template <class T> struct DropoutMask {
  T keep_prob = T(1);
  T scale = T(1);
  Matrix<T> mask; // binary

  bool identity() const noexcept { return keep_prob == T(1); }

  /// h ⊙ mask · scale, row-wise on a batch block.
  Matrix<T> apply(const Matrix<T> &h) const {
    if (mask.empty())
      return h;
    if (!h.same_shape(mask))
      throw ContractViolation("DropoutMask::apply: " + h.shape() + " vs mask " +
                              mask.shape());
    Matrix<T> out(h.rows(), h.cols());
    for (std::size_t i = 0; i < h.size(); ++i)
      out[i] = h[i] * mask[i] * scale;
    return out;
  }
};

template <class T = double>
DropoutMask<T> sample_dropout_mask(std::size_t batch, std::size_t n,
                                   double keep_prob, RngStream &rng) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0))
    throw ContractViolation("sample_dropout_mask: keep_prob " +
                            std::to_string(keep_prob) + " outside (0, 1]");
  DropoutMask<T> m;
  m.keep_prob = static_cast<T>(keep_prob);
  m.scale = static_cast<T>(1.0 / keep_prob);
  m.mask = Matrix<T>(batch, n, T(1));
  if (keep_prob < 1.0)
    for (auto &v : m.mask.values())
      v = rng.bernoulli(keep_prob) ? T(1) : T(0);
  return m;
}

struct WeightNoiseConfig {
  double stddev = 0.01;
  bool enabled = false;
};

/// Returns a copy of `w` with i.i.d. N(0, stddev²) added to each entry.
template <class T>
Matrix<T> apply_weight_noise(const Matrix<T> &w, const WeightNoiseConfig &cfg,
                             RngStream &rng) {
  if (cfg.stddev < 0.0)
    throw ContractViolation("apply_weight_noise: negative stddev");
  Matrix<T> out = w;
  if (!cfg.enabled || cfg.stddev == 0.0)
    return out;
  for (auto &v : out.values())
    v += static_cast<T>(cfg.stddev * rng.normal());
  return out;
}

} // namespace ligru
