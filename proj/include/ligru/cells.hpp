// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cells.hpp
 * @brief  Forward and BPTT for the ReLU RNN, LSTM, GRU, minimal GRU (no reset
 *         gate) and light GRU (no reset gate, ReLU candidate, batch-normalized
 *         feed-forward terms).
 *
 * Every cell is described by a list of gates. Gate g owns a feed-forward
 * matrix W_g (input_dim × units), a recurrent matrix U_g (units × units) and,
 * depending on the configuration, a bias b_g and batch-norm state for the
 * feed-forward term. Feed-forward products for all frames of a minibatch are
 * computed up front, so batch statistics are pooled over every valid frame.
 *
 *   gru:   z = σ(a_z + U_z h'), r = σ(a_r + U_r h'),
 *          c = tanh(a_h + U_h (h' ⊙ r)), h = z ⊙ h_prev + (1 − z) ⊙ c
 *   mgru:  as gru without r, c = tanh(a_h + U_h h')
 *   ligru: as mgru with c = ReLU(a_h + U_h h')
 *   lstm:  i, f, o = σ(·), g = tanh(·), c = f ⊙ c_prev + i ⊙ g,
 *          h = o ⊙ tanh(c)
 *   relu:  h = ReLU(a_h + U h')
 *
 * where a_g is the feed-forward term (W_g x + b_g, or BN(W_g x) [+ b_g]) and
 * h' is h_prev after the recurrent dropout mask.
 */
#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "init.hpp"
#include "norm.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "sequence.hpp"

namespace ligru {

enum class CellKind { vanilla_relu, lstm, gru, mgru, ligru };

inline std::string_view to_string(CellKind k) {
  switch (k) {
  case CellKind::vanilla_relu: return "relu-rnn";
  case CellKind::lstm: return "lstm";
  case CellKind::gru: return "gru";
  case CellKind::mgru: return "m-gru";
  case CellKind::ligru: return "li-gru";
  }
  return "?";
}

inline CellKind parse_cell_kind(std::string_view s) {
  if (s == "relu-rnn" || s == "vanilla-relu" || s == "relu")
    return CellKind::vanilla_relu;
  if (s == "lstm")
    return CellKind::lstm;
  if (s == "gru")
    return CellKind::gru;
  if (s == "m-gru" || s == "mgru")
    return CellKind::mgru;
  if (s == "li-gru" || s == "ligru")
    return CellKind::ligru;
  throw ContractViolation("unknown cell kind '" + std::string(s) + "'");
}

inline constexpr std::array<CellKind, 5> kAllCellKinds = {
    CellKind::vanilla_relu, CellKind::lstm, CellKind::gru, CellKind::mgru,
    CellKind::ligru};

/// Gate order per kind. Index positions are used throughout.
inline std::span<const std::string_view> gate_names(CellKind k) {
  static constexpr std::array<std::string_view, 1> relu{"h"};
  static constexpr std::array<std::string_view, 4> lstm{"i", "f", "o", "g"};
  static constexpr std::array<std::string_view, 3> gru{"z", "r", "h"};
  static constexpr std::array<std::string_view, 2> single{"z", "h"};
  switch (k) {
  case CellKind::vanilla_relu: return relu;
  case CellKind::lstm: return lstm;
  case CellKind::gru: return gru;
  case CellKind::mgru:
  case CellKind::ligru: return single;
  }
  return {};
}

inline std::size_t gate_count(CellKind k) { return gate_names(k).size(); }

inline bool has_reset_gate(CellKind k) { return k == CellKind::gru; }

/// Li-GRU with batch norm drops its biases, since β takes their role. The
/// other cells keep biases whether or not batch norm is enabled.
inline bool cell_uses_bias(CellKind k, bool batch_norm) {
  return !(k == CellKind::ligru && batch_norm);
}

template <class T> struct CellParams {
  CellKind kind = CellKind::gru;
  std::size_t input_dim = 0;
  std::size_t units = 0;
  bool batch_norm = false;
  std::vector<Matrix<T>> W;
  std::vector<Matrix<T>> U;
  std::vector<Matrix<T>> b; // empty when the cell has no biases
  std::vector<BatchNormState<T>> bn; // empty when batch norm is off

  std::size_t gates() const { return gate_count(kind); }
  bool has_bias() const { return !b.empty(); }

  /// All-zero parameters of the given shape; γ defaults to 0.1.
  static CellParams zeros(CellKind kind, std::size_t input_dim,
                          std::size_t units, bool batch_norm,
                          T gamma_init = T(0.1)) {
    if (input_dim == 0 || units == 0)
      throw ContractViolation("CellParams: zero input or unit count");
    CellParams p;
    p.kind = kind;
    p.input_dim = input_dim;
    p.units = units;
    p.batch_norm = batch_norm;
    const std::size_t g = gate_count(kind);
    for (std::size_t i = 0; i < g; ++i) {
      p.W.emplace_back(input_dim, units);
      p.U.emplace_back(units, units);
      if (cell_uses_bias(kind, batch_norm))
        p.b.emplace_back(1, units);
      if (batch_norm)
        p.bn.emplace_back(units, gamma_init);
    }
    return p;
  }

  /// Same shapes, every trainable entry zero (γ included).
  CellParams zeros_like() const {
    CellParams p = zeros(kind, input_dim, units, batch_norm, T(0));
    return p;
  }
};

/// Visits trainable tensors in a fixed order with names like "W_z", "b_h",
/// "gamma_z". Works on const and mutable parameter sets.
template <class P, class F> void for_each_param(P &p, F &&f) {
  const auto names = gate_names(p.kind);
  for (std::size_t g = 0; g < names.size(); ++g)
    f("W_" + std::string(names[g]), p.W[g]);
  for (std::size_t g = 0; g < names.size(); ++g)
    f("U_" + std::string(names[g]), p.U[g]);
  for (std::size_t g = 0; g < p.b.size(); ++g)
    f("b_" + std::string(names[g]), p.b[g]);
  for (std::size_t g = 0; g < p.bn.size(); ++g) {
    f("gamma_" + std::string(names[g]), p.bn[g].gamma);
    f("beta_" + std::string(names[g]), p.bn[g].beta);
  }
}

/// Non-trainable batch-norm running statistics.
template <class P, class F> void for_each_buffer(P &p, F &&f) {
  const auto names = gate_names(p.kind);
  for (std::size_t g = 0; g < p.bn.size(); ++g) {
    f("running_mean_" + std::string(names[g]), p.bn[g].running_mean);
    f("running_var_" + std::string(names[g]), p.bn[g].running_var);
  }
}

enum class RecurrentInit { orthogonal, glorot };

struct InitOptions {
  RecurrentInit recurrent = RecurrentInit::orthogonal;
  double weight_scale = 1.0; // multiplies W and U after drawing
  double gamma = 0.1;
  double lstm_forget_bias = 1.0;
};

template <class T>
CellParams<T> init_cell(CellKind kind, std::size_t input_dim, std::size_t units,
                        bool batch_norm, RngStream &rng,
                        const InitOptions &opt = {}) {
  auto p = CellParams<T>::zeros(kind, input_dim, units, batch_norm,
                                static_cast<T>(opt.gamma));
  for (std::size_t g = 0; g < p.gates(); ++g) {
    p.W[g] = glorot_init<T>(input_dim, units, rng);
    p.U[g] = opt.recurrent == RecurrentInit::orthogonal
                 ? orthogonal_init<T>(units, rng)
                 : glorot_init<T>(units, units, rng);
    p.W[g] *= static_cast<T>(opt.weight_scale);
    p.U[g] *= static_cast<T>(opt.weight_scale);
  }
  if (kind == CellKind::lstm && p.has_bias())
    p.b[1].fill(static_cast<T>(opt.lstm_forget_bias));
  return p;
}

/// Per-gate feed-forward terms W_g x (+ b_g, or through batch norm) for a
/// block of frames. In train mode batch statistics are taken over the valid
/// rows of `x`.
template <class T>
std::vector<Matrix<T>> feedforward(CellParams<T> &p, const Matrix<T> &x,
                                   Mode mode, RowMask mask = {},
                                   std::vector<BnCache<T>> *caches = nullptr) {
  if (x.cols() != p.input_dim)
    throw ContractViolation("feedforward: input has " +
                            std::to_string(x.cols()) + " features, cell expects " +
                            std::to_string(p.input_dim));
  std::vector<Matrix<T>> ff;
  if (caches)
    caches->assign(p.bn.size(), {});
  for (std::size_t g = 0; g < p.gates(); ++g) {
    Matrix<T> a = matmul(x, p.W[g]);
    if (p.batch_norm)
      a = bn_forward(a, p.bn[g], mode, caches ? &(*caches)[g] : nullptr, mask);
    if (p.has_bias())
      add_row_vector(a, p.b[g]);
    ff.push_back(std::move(a));
  }
  return ff;
}

template <class T> struct StepOutput {
  Matrix<T> h;
  Matrix<T> c;      // LSTM cell state
  Matrix<T> c_tanh; // LSTM tanh(c)
  Matrix<T> cand_pre;
  std::vector<Matrix<T>> gates; // activations in gate order
};

/// One recurrent step on a batch block given precomputed feed-forward terms.
template <class T>
StepOutput<T> recurrent_step(const CellParams<T> &p,
                             const std::vector<Matrix<T>> &ff,
                             const Matrix<T> &h_prev, const Matrix<T> &c_prev,
                             const DropoutMask<T> &mask) {
  const std::size_t n = p.units;
  if (h_prev.cols() != n || ff.size() != p.gates())
    throw ContractViolation("recurrent_step: state has " + h_prev.shape() +
                            ", cell has " + std::to_string(n) + " units");
  const Matrix<T> hd = mask.apply(h_prev);
  StepOutput<T> out;
  const auto act = [&](std::size_t g, const Matrix<T> &hin, auto fn) {
    Matrix<T> a = ff[g];
    matmul_acc(a, hin, p.U[g]);
    Matrix<T> s(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i)
      s[i] = fn(a[i]);
    return std::pair{std::move(a), std::move(s)};
  };
  const auto interpolate = [&](const Matrix<T> &z, const Matrix<T> &cand) {
    Matrix<T> h(z.rows(), n);
    for (std::size_t i = 0; i < h.size(); ++i)
      h[i] = z[i] * h_prev[i] + (T(1) - z[i]) * cand[i];
    return h;
  };

  switch (p.kind) {
  case CellKind::vanilla_relu: {
    auto [a, h] = act(0, hd, relu<T>);
    out.cand_pre = std::move(a);
    out.gates = {h};
    out.h = std::move(h);
    break;
  }
  case CellKind::gru: {
    auto [az, z] = act(0, hd, sigmoid<T>);
    auto [ar, r] = act(1, hd, sigmoid<T>);
    Matrix<T> hr = elementwise(Op::mul, hd, r);
    auto [ah, cand] = act(2, hr, tanh_open<T>);
    out.h = interpolate(z, cand);
    out.cand_pre = std::move(ah);
    out.gates = {std::move(z), std::move(r), std::move(cand)};
    break;
  }
  case CellKind::mgru:
  case CellKind::ligru: {
    auto [az, z] = act(0, hd, sigmoid<T>);
    auto [ah, cand] = p.kind == CellKind::mgru ? act(1, hd, tanh_open<T>)
                                               : act(1, hd, relu<T>);
    out.h = interpolate(z, cand);
    out.cand_pre = std::move(ah);
    out.gates = {std::move(z), std::move(cand)};
    break;
  }
  case CellKind::lstm: {
    auto [ai, i] = act(0, hd, sigmoid<T>);
    auto [af, f] = act(1, hd, sigmoid<T>);
    auto [ao, o] = act(2, hd, sigmoid<T>);
    auto [ag, g] = act(3, hd, tanh_open<T>);
    if (!c_prev.same_shape(h_prev))
      throw ContractViolation("lstm step: cell state " + c_prev.shape() +
                              " vs hidden " + h_prev.shape());
    out.c = Matrix<T>(h_prev.rows(), n);
    out.c_tanh = Matrix<T>(h_prev.rows(), n);
    out.h = Matrix<T>(h_prev.rows(), n);
    for (std::size_t k = 0; k < out.h.size(); ++k) {
      out.c[k] = f[k] * c_prev[k] + i[k] * g[k];
      out.c_tanh[k] = std::tanh(out.c[k]);
      out.h[k] = o[k] * out.c_tanh[k];
    }
    out.cand_pre = std::move(ag);
    out.gates = {std::move(i), std::move(f), std::move(o), std::move(g)};
    break;
  }
  }
  return out;
}

/// Single step for any kind on a block of frames `x` (batch × d). With batch
/// norm on and `mode == train`, statistics come from the rows of `x`.
template <class T>
StepOutput<T> cell_step(CellParams<T> &p, const Matrix<T> &x,
                        const Matrix<T> &h_prev, Mode mode = Mode::eval,
                        const Matrix<T> *c_prev = nullptr) {
  if (x.rows() != h_prev.rows())
    throw ContractViolation("cell_step: " + std::to_string(x.rows()) +
                            " input rows vs " + std::to_string(h_prev.rows()) +
                            " state rows");
  auto ff = feedforward(p, x, mode);
  Matrix<T> c0 = c_prev ? *c_prev : Matrix<T>(h_prev.rows(), h_prev.cols());
  return recurrent_step(p, ff, h_prev, c0, DropoutMask<T>{});
}

namespace detail {
template <class T> void require_kind(const CellParams<T> &p, CellKind k) {
  if (p.kind != k)
    throw ContractViolation(std::string(to_string(k)) + " step given " +
                            std::string(to_string(p.kind)) + " parameters");
}
} // namespace detail

template <class T>
StepOutput<T> gru_step(CellParams<T> &p, const Matrix<T> &x,
                       const Matrix<T> &h_prev) {
  detail::require_kind(p, CellKind::gru);
  return cell_step(p, x, h_prev);
}

template <class T>
StepOutput<T> mgru_step(CellParams<T> &p, const Matrix<T> &x,
                        const Matrix<T> &h_prev) {
  detail::require_kind(p, CellKind::mgru);
  return cell_step(p, x, h_prev);
}

template <class T>
StepOutput<T> ligru_step(CellParams<T> &p, const Matrix<T> &x,
                         const Matrix<T> &h_prev, Mode bn_mode) {
  detail::require_kind(p, CellKind::ligru);
  return cell_step(p, x, h_prev, bn_mode);
}

template <class T>
StepOutput<T> lstm_step(CellParams<T> &p, const Matrix<T> &x,
                        const Matrix<T> &h_prev, const Matrix<T> &c_prev) {
  detail::require_kind(p, CellKind::lstm);
  return cell_step(p, x, h_prev, Mode::eval, &c_prev);
}

template <class T>
StepOutput<T> relu_rnn_step(CellParams<T> &p, const Matrix<T> &x,
                            const Matrix<T> &h_prev) {
  detail::require_kind(p, CellKind::vanilla_relu);
  return cell_step(p, x, h_prev);
}

/// Everything a sequence forward pass caches for BPTT and gate analysis.
/// Matrices are time-major like the input; padded rows hold zeros.
template <class T> struct ForwardTrace {
  CellKind kind = CellKind::gru;
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> lengths;
  Matrix<T> input;
  std::vector<Matrix<T>> ff;
  std::vector<BnCache<T>> bn;
  std::vector<Matrix<T>> gates;
  Matrix<T> cand_pre;
  Matrix<T> h;
  Matrix<T> c;
  Matrix<T> c_tanh;
  DropoutMask<T> rec_mask;

  bool valid(std::size_t t, std::size_t b) const { return t < lengths[b]; }
  std::size_t row(std::size_t t, std::size_t b) const { return t * batch + b; }
};

/// Runs the cell over every sequence of the batch from a zero initial state.
/// Returns the time-major states; padded frames produce zero output and do
/// not advance the state.
template <class T>
ForwardTrace<T> sequence_forward(CellParams<T> &p, const SeqBatch<T> &x,
                                 Mode mode,
                                 const DropoutMask<T> &rec_mask = {}) {
  const std::size_t n = p.units;
  const std::size_t B = x.batch;
  if (!rec_mask.mask.empty() &&
      (rec_mask.mask.rows() != B || rec_mask.mask.cols() != n))
    throw ContractViolation("sequence_forward: dropout mask " +
                            rec_mask.mask.shape() + " for batch " +
                            std::to_string(B) + " × " + std::to_string(n));
  ForwardTrace<T> tr;
  tr.kind = p.kind;
  tr.batch = B;
  tr.steps = x.steps;
  tr.lengths = x.lengths;
  tr.input = x.data;
  tr.rec_mask = rec_mask;
  const auto row_mask = x.row_mask();
  tr.ff = feedforward(p, x.data, mode, RowMask(row_mask), &tr.bn);

  const std::size_t rows = x.steps * B;
  tr.h = Matrix<T>(rows, n);
  tr.cand_pre = Matrix<T>(rows, n);
  for (std::size_t g = 0; g < p.gates(); ++g)
    tr.gates.emplace_back(rows, n);
  const bool lstm = p.kind == CellKind::lstm;
  if (lstm) {
    tr.c = Matrix<T>(rows, n);
    tr.c_tanh = Matrix<T>(rows, n);
  }

  Matrix<T> h(B, n), c(B, n);
  std::vector<Matrix<T>> ff_t(p.gates());
  for (std::size_t t = 0; t < x.steps; ++t) {
    for (std::size_t g = 0; g < p.gates(); ++g)
      ff_t[g] = x.block(tr.ff[g], t);
    StepOutput<T> s;
    try {
      s = recurrent_step(p, ff_t, h, c, rec_mask);
    } catch (const std::exception &e) {
      throw ComputeError("sequence_forward: timestep " + std::to_string(t) +
                         ": " + e.what());
    }
    for (std::size_t b = 0; b < B; ++b) {
      if (!x.valid(t, b)) {
        for (std::size_t j = 0; j < n; ++j) {
          s.h(b, j) = T(0);
          s.cand_pre(b, j) = T(0);
          for (auto &gm : s.gates)
            gm(b, j) = T(0);
          if (lstm) {
            s.c(b, j) = T(0);
            s.c_tanh(b, j) = T(0);
          }
        }
        continue;
      }
      for (std::size_t j = 0; j < n; ++j) {
        h(b, j) = s.h(b, j);
        if (lstm)
          c(b, j) = s.c(b, j);
      }
    }
    x.set_block(tr.h, t, s.h);
    x.set_block(tr.cand_pre, t, s.cand_pre);
    for (std::size_t g = 0; g < p.gates(); ++g)
      x.set_block(tr.gates[g], t, s.gates[g]);
    if (lstm) {
      x.set_block(tr.c, t, s.c);
      x.set_block(tr.c_tanh, t, s.c_tanh);
    }
  }
  return tr;
}

template <class T> struct CellGrads {
  CellParams<T> params; // gradients, same layout as the parameters
  Matrix<T> d_input;    // time-major, like the forward input
};

/// Exact backpropagation through time over the full sequences (no
/// truncation). `d_states` is dLoss/dh for every time-major row.
template <class T>
CellGrads<T> sequence_backward(const CellParams<T> &p, const ForwardTrace<T> &tr,
                               const Matrix<T> &d_states) {
  const std::size_t n = p.units;
  const std::size_t B = tr.batch;
  const std::size_t rows = tr.steps * B;
  if (tr.kind != p.kind || d_states.rows() != rows || d_states.cols() != n)
    throw ContractViolation("sequence_backward: upstream " + d_states.shape() +
                            " does not match trace " + std::to_string(rows) +
                            "x" + std::to_string(n));

  CellGrads<T> out{p.zeros_like(), Matrix<T>(rows, p.input_dim)};
  auto &gp = out.params;
  const std::size_t G = p.gates();
  std::vector<Matrix<T>> d_ff(G, Matrix<T>(rows, n));

  const SeqBatch<T> shape{B, tr.steps, tr.lengths, {}};
  const auto blk = [&](const Matrix<T> &m, std::size_t t) {
    return shape.block(m, t);
  };
  const auto &mask = tr.rec_mask;

  Matrix<T> dh_carry(B, n), dc_carry(B, n);
  for (std::size_t t = tr.steps; t-- > 0;) {
    Matrix<T> dh = blk(d_states, t);
    dh += dh_carry;
    for (std::size_t b = 0; b < B; ++b)
      if (!tr.valid(t, b))
        for (std::size_t j = 0; j < n; ++j)
          dh(b, j) = T(0);

    const Matrix<T> hp = t ? blk(tr.h, t - 1) : Matrix<T>(B, n);
    const Matrix<T> hd = mask.apply(hp);
    const Matrix<T> pre = blk(tr.cand_pre, t);
    std::vector<Matrix<T>> gs;
    for (std::size_t g = 0; g < G; ++g)
      gs.push_back(blk(tr.gates[g], t));

    std::vector<Matrix<T>> da(G, Matrix<T>(B, n));
    Matrix<T> d_hd(B, n);
    Matrix<T> d_hp(B, n);

    switch (p.kind) {
    case CellKind::vanilla_relu: {
      for (std::size_t k = 0; k < dh.size(); ++k)
        da[0][k] = pre[k] > T(0) ? dh[k] : T(0);
      matmul_tn_acc(gp.U[0], hd, da[0]);
      matmul_nt_acc(d_hd, da[0], p.U[0]);
      break;
    }
    case CellKind::gru: {
      const auto &z = gs[0], &r = gs[1], &cand = gs[2];
      for (std::size_t k = 0; k < dh.size(); ++k) {
        const T dz = dh[k] * (hp[k] - cand[k]);
        da[0][k] = dz * z[k] * (T(1) - z[k]);
        const T dcand = dh[k] * (T(1) - z[k]);
        da[2][k] = dcand * (T(1) - cand[k] * cand[k]);
        d_hp[k] = dh[k] * z[k];
      }
      const Matrix<T> hr = elementwise(Op::mul, hd, r);
      matmul_tn_acc(gp.U[2], hr, da[2]);
      Matrix<T> d_hr(B, n);
      matmul_nt_acc(d_hr, da[2], p.U[2]);
      for (std::size_t k = 0; k < dh.size(); ++k) {
        const T dr = d_hr[k] * hd[k];
        da[1][k] = dr * r[k] * (T(1) - r[k]);
        d_hd[k] = d_hr[k] * r[k];
      }
      matmul_tn_acc(gp.U[0], hd, da[0]);
      matmul_tn_acc(gp.U[1], hd, da[1]);
      matmul_nt_acc(d_hd, da[0], p.U[0]);
      matmul_nt_acc(d_hd, da[1], p.U[1]);
      break;
    }
    case CellKind::mgru:
    case CellKind::ligru: {
      const auto &z = gs[0], &cand = gs[1];
      const bool relu_cand = p.kind == CellKind::ligru;
      for (std::size_t k = 0; k < dh.size(); ++k) {
        const T dz = dh[k] * (hp[k] - cand[k]);
        da[0][k] = dz * z[k] * (T(1) - z[k]);
        const T dcand = dh[k] * (T(1) - z[k]);
        da[1][k] = relu_cand ? (pre[k] > T(0) ? dcand : T(0))
                             : dcand * (T(1) - cand[k] * cand[k]);
        d_hp[k] = dh[k] * z[k];
      }
      for (std::size_t g = 0; g < 2; ++g) {
        matmul_tn_acc(gp.U[g], hd, da[g]);
        matmul_nt_acc(d_hd, da[g], p.U[g]);
      }
      break;
    }
    case CellKind::lstm: {
      const auto &i = gs[0], &f = gs[1], &o = gs[2], &g = gs[3];
      const Matrix<T> ct = blk(tr.c_tanh, t);
      const Matrix<T> cp = t ? blk(tr.c, t - 1) : Matrix<T>(B, n);
      for (std::size_t k = 0; k < dh.size(); ++k) {
        const T d_o = dh[k] * ct[k];
        const T dc = dh[k] * o[k] * (T(1) - ct[k] * ct[k]) + dc_carry[k];
        const T d_i = dc * g[k];
        const T d_f = dc * cp[k];
        const T d_g = dc * i[k];
        da[0][k] = d_i * i[k] * (T(1) - i[k]);
        da[1][k] = d_f * f[k] * (T(1) - f[k]);
        da[2][k] = d_o * o[k] * (T(1) - o[k]);
        da[3][k] = d_g * (T(1) - g[k] * g[k]);
        dc_carry[k] = dc * f[k];
      }
      for (std::size_t q = 0; q < 4; ++q) {
        matmul_tn_acc(gp.U[q], hd, da[q]);
        matmul_nt_acc(d_hd, da[q], p.U[q]);
      }
      break;
    }
    }

    // dropout is a fixed elementwise scaling, so its transpose is itself
    d_hp += mask.apply(d_hd);
    dh_carry = std::move(d_hp);
    for (std::size_t g = 0; g < G; ++g)
      shape.set_block(d_ff[g], t, da[g]);
  }

  for (std::size_t g = 0; g < G; ++g) {
    if (p.has_bias())
      gp.b[g] = column_sums(d_ff[g]);
    Matrix<T> d_pre;
    if (p.batch_norm) {
      auto bg = bn_backward(tr.bn[g], p.bn[g], d_ff[g]);
      gp.bn[g].gamma = std::move(bg.d_gamma);
      gp.bn[g].beta = std::move(bg.d_beta);
      d_pre = std::move(bg.d_pre);
    } else {
      d_pre = std::move(d_ff[g]);
    }
    matmul_tn_acc(gp.W[g], tr.input, d_pre);
    matmul_nt_acc(out.d_input, d_pre, p.W[g]);
  }
  return out;
}

} // namespace ligru
