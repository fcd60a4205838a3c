// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ctc.hpp
 * @brief  CTC loss (log-space forward-backward), best-path decoding and label
 *         set mapping.
 *
 * Outputs have K + 1 columns; the blank is the last index K.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "numeric.hpp"

namespace ligru {

using LabelSeq = std::vector<int>;

namespace detail {
template <class T> T log_add(T a, T b) {
  constexpr T ninf = -std::numeric_limits<T>::infinity();
  if (a == ninf)
    return b;
  if (b == ninf)
    return a;
  const T m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}
} // namespace detail

/// Frames needed to emit `target`: one per label plus one blank between
/// each pair of equal neighbours.
inline std::size_t ctc_min_frames(const LabelSeq &target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1])
      ++n;
  return n;
}

template <class T> struct CtcResult {
  T loss = T(0);     // −log p(target | x)
  Matrix<T> grad;    // dLoss / d log_probs, T × (K + 1)
};

/// CTC negative log-likelihood of one sequence. `log_probs` is T × (K + 1)
/// and is treated as free inputs: the gradient is with respect to each
/// entry, without renormalization.
template <class T>
CtcResult<T> ctc_loss(const Matrix<T> &log_probs, const LabelSeq &target) {
  const std::size_t frames = log_probs.rows();
  if (log_probs.cols() < 2)
    throw ContractViolation("ctc_loss: need at least one label and the blank");
  const int blank = static_cast<int>(log_probs.cols()) - 1;
  for (int l : target)
    if (l < 0 || l >= blank)
      throw ContractViolation("ctc_loss: label " + std::to_string(l) +
                              " outside [0, " + std::to_string(blank) + ")");
  if (frames < ctc_min_frames(target) || frames == 0)
    throw ContractViolation("ctc_loss: " + std::to_string(frames) +
                            " frames cannot emit a target needing " +
                            std::to_string(ctc_min_frames(target)));

  // Blank-augmented target: −, l1, −, l2, ..., lL, −
  const std::size_t S = 2 * target.size() + 1;
  std::vector<int> ext(S, blank);
  for (std::size_t i = 0; i < target.size(); ++i)
    ext[2 * i + 1] = target[i];

  constexpr T ninf = -std::numeric_limits<T>::infinity();
  // alpha includes the emission at t, beta covers frames after t only
  Matrix<T> alpha(frames, S, ninf), beta(frames, S, ninf);
  const auto lp = [&](std::size_t t, std::size_t s) {
    return log_probs(t, static_cast<std::size_t>(ext[s]));
  };
  const auto can_skip = [&](std::size_t s) {
    return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
  };

  alpha(0, 0) = lp(0, 0);
  if (S > 1)
    alpha(0, 1) = lp(0, 1);
  for (std::size_t t = 1; t < frames; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      T a = alpha(t - 1, s);
      if (s >= 1)
        a = detail::log_add(a, alpha(t - 1, s - 1));
      if (can_skip(s))
        a = detail::log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == ninf ? ninf : a + lp(t, s);
    }

  beta(frames - 1, S - 1) = T(0);
  if (S > 1)
    beta(frames - 1, S - 2) = T(0);
  for (std::size_t t = frames - 1; t-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      T b = beta(t + 1, s) + lp(t + 1, s);
      if (s + 1 < S)
        b = detail::log_add(b, beta(t + 1, s + 1) + lp(t + 1, s + 1));
      if (s + 2 < S && can_skip(s + 2))
        b = detail::log_add(b, beta(t + 1, s + 2) + lp(t + 1, s + 2));
      beta(t, s) = b;
    }

  T log_p = alpha(frames - 1, S - 1);
  if (S > 1)
    log_p = detail::log_add(log_p, alpha(frames - 1, S - 2));
  if (!std::isfinite(log_p))
    throw ComputeError("ctc_loss: target has zero probability");

  CtcResult<T> res;
  res.loss = -log_p;
  res.grad = Matrix<T>(frames, log_probs.cols());
  std::vector<T> acc(log_probs.cols());
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(acc.begin(), acc.end(), ninf);
    for (std::size_t s = 0; s < S; ++s) {
      auto &a = acc[static_cast<std::size_t>(ext[s])];
      a = detail::log_add(a, alpha(t, s) + beta(t, s));
    }
    for (std::size_t k = 0; k < acc.size(); ++k)
      res.grad(t, k) = acc[k] == ninf ? T(0) : -std::exp(acc[k] - log_p);
  }
  return res;
}

/// Row-wise log-softmax with max subtraction.
template <class T> Matrix<T> log_softmax(const Matrix<T> &logits) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const T m = *std::max_element(row.begin(), row.end());
    T s = T(0);
    for (T v : row)
      s += std::exp(v - m);
    const T lse = m + std::log(s);
    for (std::size_t k = 0; k < row.size(); ++k)
      out(r, k) = row[k] - lse;
  }
  return out;
}

/// Backward of log_softmax: dlogit = g − softmax · Σ g.
template <class T>
Matrix<T> log_softmax_backward(const Matrix<T> &log_probs,
                               const Matrix<T> &grad) {
  Matrix<T> out(grad.rows(), grad.cols());
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    T s = T(0);
    for (T v : grad.row(r))
      s += v;
    for (std::size_t k = 0; k < grad.cols(); ++k)
      out(r, k) = grad(r, k) - std::exp(log_probs(r, k)) * s;
  }
  return out;
}

/// Argmax per frame (ties to the lowest index), collapse repeats, drop blanks.
template <class T> LabelSeq best_path_decode(const Matrix<T> &log_probs) {
  LabelSeq out;
  if (log_probs.cols() == 0)
    return out;
  const int blank = static_cast<int>(log_probs.cols()) - 1;
  int prev = -1;
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    const auto row = log_probs.row(t);
    const int best = static_cast<int>(
        std::max_element(row.begin(), row.end()) - row.begin());
    if (best != prev && best != blank)
      out.push_back(best);
    prev = best;
  }
  return out;
}

/// Many-to-one map from training label ids to evaluation label ids.
class LabelMap {
public:
  LabelMap() = default;
  explicit LabelMap(std::map<int, int> m) : map_(std::move(m)) {}

  static LabelMap identity(int labels) {
    std::map<int, int> m;
    for (int i = 0; i < labels; ++i)
      m[i] = i;
    return LabelMap(std::move(m));
  }

  /// Text format: one "<train-id> <eval-id>" pair per line.
  static LabelMap read(const std::string &path) {
    std::ifstream in(path);
    if (!in)
      throw ContractViolation("LabelMap: cannot open " + path);
    std::map<int, int> m;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos)
        continue;
      std::istringstream ls(line);
      long from, to;
      std::string extra;
      if (!(ls >> from >> to) || (ls >> extra) || from < 0 || to < 0)
        throw ContractViolation("LabelMap: bad line " + std::to_string(lineno) +
                                " in " + path);
      if (!m.emplace(static_cast<int>(from), static_cast<int>(to)).second)
        throw ContractViolation("LabelMap: duplicate id " +
                                std::to_string(from) + " in " + path);
    }
    return LabelMap(std::move(m));
  }

  void write(const std::string &path) const {
    std::ofstream out(path);
    for (auto [a, b] : map_)
      out << a << ' ' << b << '\n';
  }

  /// Throws unless every id in [0, labels) is mapped.
  void require_total(int labels) const {
    for (int i = 0; i < labels; ++i)
      if (!map_.count(i))
        throw ContractViolation("LabelMap: id " + std::to_string(i) +
                                " is not mapped");
  }

  int operator()(int id) const {
    auto it = map_.find(id);
    if (it == map_.end())
      throw ContractViolation("LabelMap: unmapped id " + std::to_string(id));
    return it->second;
  }

  std::size_t size() const { return map_.size(); }

private:
  std::map<int, int> map_;
};

/// Maps every label, then collapses adjacent duplicates the mapping created.
/// Repeats already present in the input ("a a") are kept.
inline LabelSeq map_labels(const LabelSeq &seq, const LabelMap &map,
                           bool collapse = true) {
  LabelSeq out;
  int prev = -1;
  for (int l : seq) {
    const int m = map(l);
    const bool merged = !out.empty() && out.back() == m && prev != l;
    prev = l;
    if (collapse && merged)
      continue;
    out.push_back(m);
  }
  return out;
}

/// Levenshtein distance between label sequences.
inline std::size_t edit_distance(const LabelSeq &a, const LabelSeq &b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j)
    prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

} // namespace ligru
