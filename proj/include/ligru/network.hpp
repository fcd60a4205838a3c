// SPDX-License-Identifier: Apache-2.0
/**
 * @file   network.hpp
 * @brief  Stacked (bi)directional recurrent layers with a linear output layer
 *         feeding either a framewise softmax cross-entropy or a CTC loss.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cells.hpp"
#include "ctc.hpp"
#include "init.hpp"
#include "norm.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "sequence.hpp"

namespace ligru {

struct StackConfig {
  CellKind kind = CellKind::ligru;
  std::size_t layers = 1;
  std::size_t units = 32;
  bool bidirectional = true;
  double keep_prob = 1.0;
  bool batch_norm = true;

  std::size_t directions() const { return bidirectional ? 2 : 1; }
  std::size_t output_width() const { return directions() * units; }

  void validate() const {
    if (layers < 1)
      throw ContractViolation("StackConfig: layers must be >= 1");
    if (units < 1)
      throw ContractViolation("StackConfig: units must be >= 1");
    if (!(keep_prob > 0.0 && keep_prob <= 1.0))
      throw ContractViolation("StackConfig: keep_prob must lie in (0, 1]");
  }
};

enum class HeadKind { framewise, ctc };

template <class T> struct Network {
  StackConfig config;
  HeadKind head = HeadKind::framewise;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0; // classes; for CTC this includes the blank
  std::vector<std::vector<CellParams<T>>> layers; // [layer][direction]
  Matrix<T> head_W; // output_width × output_dim
  Matrix<T> head_b; // 1 × output_dim

  std::size_t layer_input_dim(std::size_t l) const {
    return l == 0 ? input_dim : config.output_width();
  }

  static Network create(const StackConfig &cfg, HeadKind head,
                        std::size_t input_dim, std::size_t output_dim,
                        RngStream &rng, const InitOptions &opt = {}) {
    cfg.validate();
    if (input_dim == 0 || output_dim == 0)
      throw ContractViolation("Network: zero input or output dimension");
    if (head == HeadKind::ctc && output_dim < 2)
      throw ContractViolation("Network: CTC head needs at least one label");
    Network net;
    net.config = cfg;
    net.head = head;
    net.input_dim = input_dim;
    net.output_dim = output_dim;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      std::vector<CellParams<T>> dirs;
      for (std::size_t d = 0; d < cfg.directions(); ++d)
        dirs.push_back(init_cell<T>(cfg.kind, net.layer_input_dim(l), cfg.units,
                                    cfg.batch_norm, rng, opt));
      net.layers.push_back(std::move(dirs));
    }
    net.head_W = glorot_init<T>(cfg.output_width(), output_dim, rng);
    net.head_b = Matrix<T>(1, output_dim);
    return net;
  }

  /// Gradient container with the same layout, all zeros.
  Network zeros_like() const {
    Network g = *this;
    for (auto &layer : g.layers)
      for (auto &cell : layer)
        cell = cell.zeros_like();
    g.head_W.fill(T(0));
    g.head_b.fill(T(0));
    return g;
  }
};

inline std::string direction_name(std::size_t d) {
  return d == 0 ? "fwd" : "bwd";
}

/// Visits every trainable tensor as (qualified name, base name, matrix),
/// e.g. ("l0.fwd.W_z", "W_z", m). The order is fixed.
template <class N, class F> void for_each_network_param(N &net, F &&f) {
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    for (std::size_t d = 0; d < net.layers[l].size(); ++d) {
      const std::string prefix =
          "l" + std::to_string(l) + "." + direction_name(d) + ".";
      for_each_param(net.layers[l][d], [&](const std::string &name, auto &m) {
        f(prefix + name, name, m);
      });
    }
  f(std::string("head.W"), std::string("head.W"), net.head_W);
  f(std::string("head.b"), std::string("head.b"), net.head_b);
}

template <class N, class F> void for_each_network_buffer(N &net, F &&f) {
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    for (std::size_t d = 0; d < net.layers[l].size(); ++d) {
      const std::string prefix =
          "l" + std::to_string(l) + "." + direction_name(d) + ".";
      for_each_buffer(net.layers[l][d], [&](const std::string &name, auto &m) {
        f(prefix + name, m);
      });
    }
}

/// Weight matrices only (W, U and the output matrix), as perturbed by
/// weight noise.
template <class N, class F> void for_each_weight_matrix(N &net, F &&f) {
  for (auto &layer : net.layers)
    for (auto &cell : layer) {
      for (auto &w : cell.W)
        f(w);
      for (auto &u : cell.U)
        f(u);
    }
  f(net.head_W);
}

/// Copy of the network with i.i.d. Gaussian noise on every weight matrix.
template <class T>
Network<T> apply_weight_noise(const Network<T> &net,
                              const WeightNoiseConfig &cfg, RngStream &rng) {
  Network<T> out = net;
  if (!cfg.enabled)
    return out;
  for_each_weight_matrix(out, [&](Matrix<T> &w) {
    w = apply_weight_noise(w, cfg, rng);
  });
  return out;
}

template <class T> struct LayerTrace {
  std::vector<ForwardTrace<T>> dirs; // backward direction runs on reversed time
  Matrix<T> output;                  // time-major, width directions·units
  DropoutMask<T> out_mask;           // per-frame mask applied to output
};

template <class T> struct NetworkTrace {
  SeqBatch<T> input;
  std::vector<LayerTrace<T>> layers;
  Matrix<T> top;    // last layer output after dropout
  Matrix<T> logits; // time-major, output_dim columns
};

/// Dropout masks for one forward pass. Empty entries mean no dropout.
template <class T> struct PassMasks {
  std::vector<std::vector<DropoutMask<T>>> recurrent; // [layer][direction]
  std::vector<DropoutMask<T>> output;                 // [layer]
};

/// Recurrent masks are (batch × units), one per direction and layer, shared
/// over time. Output masks are drawn per frame and feed the next layer.
template <class T>
PassMasks<T> sample_pass_masks(const Network<T> &net, const SeqBatch<T> &x,
                               RngStream &rng) {
  PassMasks<T> m;
  const double keep = net.config.keep_prob;
  if (keep >= 1.0)
    return m;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    std::vector<DropoutMask<T>> dirs;
    for (std::size_t d = 0; d < net.layers[l].size(); ++d)
      dirs.push_back(
          sample_dropout_mask<T>(x.batch, net.config.units, keep, rng));
    m.recurrent.push_back(std::move(dirs));
    if (l + 1 < net.layers.size())
      m.output.push_back(sample_dropout_mask<T>(
          x.steps * x.batch, net.config.output_width(), keep, rng));
    else
      m.output.emplace_back();
  }
  return m;
}

/// One bidirectional layer: the forward direction scans t = 0..T_i−1, the
/// backward direction scans the time-reversed valid frames. Outputs are
/// concatenated per frame as [forward ; backward].
template <class T>
LayerTrace<T> bidir_layer_forward(std::vector<CellParams<T>> &dirs,
                                  const SeqBatch<T> &x, Mode mode,
                                  const std::vector<DropoutMask<T>> &masks = {}) {
  LayerTrace<T> lt;
  const std::size_t n = dirs.front().units;
  for (std::size_t d = 0; d < dirs.size(); ++d)
    if (dirs[d].kind != dirs.front().kind || dirs[d].units != n)
      throw ContractViolation("bidir_layer_forward: directions differ in kind "
                              "or width");
  lt.output = Matrix<T>(x.steps * x.batch, n * dirs.size());
  for (std::size_t d = 0; d < dirs.size(); ++d) {
    const DropoutMask<T> mask = masks.empty() ? DropoutMask<T>{} : masks[d];
    const SeqBatch<T> in = d == 0 ? x : x.with_data(x.reverse_valid(x.data));
    lt.dirs.push_back(sequence_forward(dirs[d], in, mode, mask));
    const Matrix<T> h =
        d == 0 ? lt.dirs.back().h : x.reverse_valid(lt.dirs.back().h);
    for (std::size_t r = 0; r < h.rows(); ++r)
      std::copy_n(h.row(r).begin(), n, lt.output.row(r).begin() + d * n);
  }
  return lt;
}

template <class T>
NetworkTrace<T> network_forward(Network<T> &net, const SeqBatch<T> &x,
                                Mode mode, const PassMasks<T> &masks = {}) {
  if (x.dim() != net.input_dim)
    throw ContractViolation("network_forward: input has " +
                            std::to_string(x.dim()) + " features, network "
                            "expects " + std::to_string(net.input_dim));
  NetworkTrace<T> tr;
  tr.input = x;
  SeqBatch<T> cur = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const std::vector<DropoutMask<T>> rec =
        masks.recurrent.empty() ? std::vector<DropoutMask<T>>{}
                                : masks.recurrent[l];
    LayerTrace<T> lt = bidir_layer_forward(net.layers[l], cur, mode, rec);
    if (!masks.output.empty())
      lt.out_mask = masks.output[l];
    cur = x.with_data(lt.out_mask.apply(lt.output));
    tr.layers.push_back(std::move(lt));
  }
  tr.top = cur.data;
  tr.logits = matmul(tr.top, net.head_W);
  add_row_vector(tr.logits, net.head_b);
  const auto mask = x.row_mask();
  for (std::size_t r = 0; r < tr.logits.rows(); ++r)
    if (!mask[r])
      std::fill(tr.logits.row(r).begin(), tr.logits.row(r).end(), T(0));
  return tr;
}

/// Backpropagates dLoss/dlogits through the head and every layer. Returns
/// gradients in a network-shaped container; d_input receives dLoss/dx.
template <class T>
Network<T> network_backward(const Network<T> &net, const NetworkTrace<T> &tr,
                            const Matrix<T> &d_logits,
                            Matrix<T> *d_input = nullptr) {
  Network<T> g = net.zeros_like();
  const SeqBatch<T> &x = tr.input;
  matmul_tn_acc(g.head_W, tr.top, d_logits);
  g.head_b = column_sums(d_logits);
  Matrix<T> d_cur(tr.top.rows(), tr.top.cols());
  matmul_nt_acc(d_cur, d_logits, net.head_W);

  for (std::size_t l = net.layers.size(); l-- > 0;) {
    const LayerTrace<T> &lt = tr.layers[l];
    Matrix<T> d_out = lt.out_mask.apply(d_cur);
    const std::size_t n = net.config.units;
    Matrix<T> d_in(x.steps * x.batch, net.layer_input_dim(l));
    for (std::size_t d = 0; d < lt.dirs.size(); ++d) {
      Matrix<T> dh(d_out.rows(), n);
      for (std::size_t r = 0; r < dh.rows(); ++r)
        std::copy_n(d_out.row(r).begin() + d * n, n, dh.row(r).begin());
      if (d == 1)
        dh = x.reverse_valid(dh);
      CellGrads<T> cg = sequence_backward(net.layers[l][d], lt.dirs[d], dh);
      g.layers[l][d] = std::move(cg.params);
      if (d == 1)
        cg.d_input = x.reverse_valid(cg.d_input);
      d_in += cg.d_input;
    }
    d_cur = std::move(d_in);
  }
  if (d_input)
    *d_input = std::move(d_cur);
  return g;
}

template <class T> struct HeadResult {
  T loss = T(0);
  Matrix<T> d_logits;
};

/// Mean negative log-likelihood over the valid frames. Targets are per
/// time-major row; rows outside `mask` are ignored.
template <class T>
HeadResult<T> softmax_ce_head(const Matrix<T> &logits,
                              const std::vector<int> &targets,
                              std::span<const std::uint8_t> mask = {}) {
  if (targets.size() != logits.rows())
    throw ContractViolation("softmax_ce_head: " + std::to_string(targets.size()) +
                            " targets for " + std::to_string(logits.rows()) +
                            " frames");
  HeadResult<T> res{T(0), Matrix<T>(logits.rows(), logits.cols())};
  const Matrix<T> lp = log_softmax(logits);
  std::size_t count = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r)
    if (mask.empty() || mask[r])
      ++count;
  if (count == 0)
    return res;
  const T inv = T(1) / static_cast<T>(count);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (!mask.empty() && !mask[r])
      continue;
    const int y = targets[r];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols())
      throw ContractViolation("softmax_ce_head: target " + std::to_string(y) +
                              " outside [0, " + std::to_string(logits.cols()) +
                              ")");
    res.loss -= lp(r, static_cast<std::size_t>(y)) * inv;
    for (std::size_t k = 0; k < logits.cols(); ++k)
      res.d_logits(r, k) = std::exp(lp(r, k)) * inv;
    res.d_logits(r, static_cast<std::size_t>(y)) -= inv;
  }
  return res;
}

/// Summed CTC loss over the batch, with the gradient taken through the
/// log-softmax back to the logits.
template <class T>
HeadResult<T> ctc_head(const Matrix<T> &logits, const SeqBatch<T> &shape,
                       const std::vector<LabelSeq> &targets) {
  if (targets.size() != shape.batch)
    throw ContractViolation("ctc_head: target count does not match batch");
  HeadResult<T> res{T(0), Matrix<T>(logits.rows(), logits.cols())};
  for (std::size_t b = 0; b < shape.batch; ++b) {
    const Matrix<T> lp = log_softmax(shape.unpack(logits, b));
    CtcResult<T> c;
    try {
      c = ctc_loss(lp, targets[b]);
    } catch (const ContractViolation &e) {
      throw ContractViolation("ctc_head: sequence " + std::to_string(b) + ": " +
                              e.what());
    }
    res.loss += c.loss;
    const Matrix<T> dl = log_softmax_backward(lp, c.grad);
    for (std::size_t t = 0; t < shape.lengths[b]; ++t)
      std::copy_n(dl.row(t).begin(), dl.cols(),
                  res.d_logits.row(shape.row(t, b)).begin());
  }
  return res;
}

} // namespace ligru
