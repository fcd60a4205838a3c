// SPDX-License-Identifier: Apache-2.0
/**
 * @file   sequence.hpp
 * @brief  Padded minibatch of variable-length sequences.
 *
 * Frames are stored time-major: row t * batch + b holds frame t of sequence
 * b. Rows with t >= lengths[b] are padding and carry zeros.
 */
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "numeric.hpp"

namespace ligru {

template <class T> struct SeqBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> lengths;
  Matrix<T> data; // (steps * batch) × dim

  std::size_t dim() const noexcept { return data.cols(); }
  std::size_t row(std::size_t t, std::size_t b) const noexcept {
    return t * batch + b;
  }
  bool valid(std::size_t t, std::size_t b) const noexcept {
    return t < lengths[b];
  }
  std::size_t valid_frames() const noexcept {
    std::size_t n = 0;
    for (auto l : lengths)
      n += l;
    return n;
  }
  std::vector<std::uint8_t> row_mask() const {
    std::vector<std::uint8_t> m(steps * batch, 0);
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t b = 0; b < batch; ++b)
        m[row(t, b)] = valid(t, b) ? 1 : 0;
    return m;
  }

  /// Pads per-sequence T_i × d matrices into one block.
  static SeqBatch pack(const std::vector<const Matrix<T> *> &seqs) {
    if (seqs.empty())
      throw ContractViolation("SeqBatch::pack: empty batch");
    SeqBatch sb;
    sb.batch = seqs.size();
    const std::size_t d = seqs.front()->cols();
    for (const auto *s : seqs) {
      if (s->cols() != d)
        throw ContractViolation("SeqBatch::pack: mixed feature dimensions");
      if (s->rows() == 0)
        throw ContractViolation("SeqBatch::pack: empty sequence");
      sb.lengths.push_back(s->rows());
      sb.steps = std::max(sb.steps, s->rows());
    }
    sb.data = Matrix<T>(sb.steps * sb.batch, d);
    for (std::size_t b = 0; b < sb.batch; ++b)
      for (std::size_t t = 0; t < sb.lengths[b]; ++t)
        std::copy_n(seqs[b]->row(t).begin(), d, sb.data.row(sb.row(t, b)).begin());
    return sb;
  }

  static SeqBatch pack(const std::vector<Matrix<T>> &seqs) {
    std::vector<const Matrix<T> *> ptrs;
    for (const auto &s : seqs)
      ptrs.push_back(&s);
    return pack(ptrs);
  }

  /// Frames of sequence b as a T_b × dim matrix.
  Matrix<T> unpack(std::size_t b) const { return unpack(data, b); }

  Matrix<T> unpack(const Matrix<T> &rows, std::size_t b) const {
    Matrix<T> out(lengths[b], rows.cols());
    for (std::size_t t = 0; t < lengths[b]; ++t)
      std::copy_n(rows.row(row(t, b)).begin(), rows.cols(), out.row(t).begin());
    return out;
  }

  /// Copies block t (batch × cols) out of a time-major matrix.
  Matrix<T> block(const Matrix<T> &rows, std::size_t t) const {
    Matrix<T> out(batch, rows.cols());
    std::copy_n(rows.data() + t * batch * rows.cols(), batch * rows.cols(),
                out.data());
    return out;
  }

  void set_block(Matrix<T> &rows, std::size_t t, const Matrix<T> &blk) const {
    std::copy_n(blk.data(), batch * rows.cols(),
                rows.data() + t * batch * rows.cols());
  }

  /// Reverses each sequence within its valid length; padding stays zero.
  /// Applying it twice restores the input.
  Matrix<T> reverse_valid(const Matrix<T> &rows) const {
    Matrix<T> out(rows.rows(), rows.cols());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < lengths[b]; ++t)
        std::copy_n(rows.row(row(lengths[b] - 1 - t, b)).begin(), rows.cols(),
                    out.row(row(t, b)).begin());
    return out;
  }

  SeqBatch with_data(Matrix<T> rows) const {
    SeqBatch sb{batch, steps, lengths, std::move(rows)};
    return sb;
  }
};

} // namespace ligru
