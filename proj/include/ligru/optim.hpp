// SPDX-License-Identifier: Apache-2.0
/**
 * @file   optim.hpp
 * @brief  Adam, threshold-based learning-rate halving and length-sorted
 *         minibatch planning.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "numeric.hpp"

namespace ligru {

template <class T> struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Matrix<T>> m; // first moments, in parameter visiting order
  std::vector<Matrix<T>> v; // second moments
};

/// Named view of one parameter tensor and its gradient.
template <class T> struct ParamSlot {
  std::string name;
  Matrix<T> *value;
  const Matrix<T> *grad;
};

/// Bias-corrected Adam update over all slots. No clipping is applied. A
/// non-finite gradient aborts before any parameter changes.
template <class T>
void adam_step(std::vector<ParamSlot<T>> &slots, AdamState<T> &state) {
  for (const auto &s : slots) {
    if (!s.value->same_shape(*s.grad))
      throw ContractViolation("adam_step: gradient for " + s.name + " is " +
                              s.grad->shape() + ", parameter is " +
                              s.value->shape());
    if (!all_finite(*s.grad))
      throw ComputeError("adam_step: non-finite gradient in " + s.name);
  }
  if (state.m.empty()) {
    for (const auto &s : slots) {
      state.m.emplace_back(s.value->rows(), s.value->cols());
      state.v.emplace_back(s.value->rows(), s.value->cols());
    }
  }
  if (state.m.size() != slots.size())
    throw ContractViolation("adam_step: optimizer state tracks " +
                            std::to_string(state.m.size()) + " tensors, got " +
                            std::to_string(slots.size()));

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    Matrix<T> &w = *slots[i].value;
    const Matrix<T> &g = *slots[i].grad;
    Matrix<T> &m = state.m[i];
    Matrix<T> &v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const double mhat = static_cast<double>(m[k]) / bc1;
      const double vhat = static_cast<double>(v[k]) / bc2;
      w[k] -= static_cast<T>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

/// Halves the learning rate whenever the dev error drops by less than the
/// threshold (absolute, in the units of the metric) from one epoch to the
/// next. The first observation only sets the baseline.
struct LrSchedule {
  double lr = 1e-3;
  double threshold = 0.001;
  std::vector<double> history;
  std::size_t halvings = 0;

  double update(double dev_metric) {
    if (!history.empty()) {
      const double improvement = history.back() - dev_metric;
      if (improvement < threshold) {
        lr /= 2.0;
        ++halvings;
      }
    }
    history.push_back(dev_metric);
    return lr;
  }
};

struct BatchPlan {
  std::size_t batch_size = 8;
  std::vector<std::vector<std::size_t>> batches;

  /// Zero-padded frames the plan introduces.
  std::size_t padded_frames(const std::vector<std::size_t> &lengths) const {
    std::size_t pad = 0;
    for (const auto &b : batches) {
      std::size_t mx = 0;
      for (auto i : b)
        mx = std::max(mx, lengths[i]);
      for (auto i : b)
        pad += mx - lengths[i];
    }
    return pad;
  }
};

/// Stable ascending sort by length (ties by id), cut into consecutive
/// chunks of `batch_size`.
inline BatchPlan build_batch_plan(const std::vector<std::size_t> &lengths,
                                  std::size_t batch_size) {
  if (batch_size == 0)
    throw ContractViolation("build_batch_plan: batch size must be >= 1");
  if (lengths.empty())
    throw ContractViolation("build_batch_plan: empty dataset");
  std::vector<std::size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return lengths[a] < lengths[b];
                   });
  BatchPlan plan;
  plan.batch_size = batch_size;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    plan.batches.emplace_back(
        order.begin() + static_cast<std::ptrdiff_t>(i),
        order.begin() +
            static_cast<std::ptrdiff_t>(std::min(i + batch_size, order.size())));
  return plan;
}

} // namespace ligru
