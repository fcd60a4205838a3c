// SPDX-License-Identifier: Apache-2.0
/**
 * @file   gradcheck.hpp
 * @brief  Central finite-difference checks for cell BPTT, whole networks
 *         and the CTC loss.
 *
 * All checks run in double precision. Relative error of an entry is
 * |a − f| / max(|a|, |f|, 1e-8). Random instances whose ReLU
 * pre-activations come within 1e-3 of the kink are redrawn.
 */
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cells.hpp"
#include "ctc.hpp"
#include "network.hpp"
#include "norm.hpp"
#include "rng.hpp"
#include "sequence.hpp"

namespace ligru {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  double kink_margin = 1e-3;
  std::size_t max_redraws = 50;
};

inline double relative_error(double analytic, double numeric) {
  const double den = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / den;
}

struct TensorCheck {
  std::string name;
  std::size_t entries = 0;
  double max_rel = 0.0;
  std::size_t worst = 0; // flat index of the worst entry
  double analytic = 0.0; // values at the worst entry
  double numeric = 0.0;
};

struct GradCheckReport {
  std::string label;
  std::vector<TensorCheck> tensors;
  std::size_t redraws = 0;

  double max_rel() const {
    double m = 0.0;
    for (const auto &t : tensors)
      m = std::max(m, t.max_rel);
    return m;
  }
  std::size_t entries() const {
    std::size_t n = 0;
    for (const auto &t : tensors)
      n += t.entries;
    return n;
  }
  const TensorCheck *worst() const {
    const TensorCheck *w = nullptr;
    for (const auto &t : tensors)
      if (!w || t.max_rel > w->max_rel)
        w = &t;
    return w;
  }
  bool passed(double tol) const { return max_rel() < tol; }
};

/// Perturbs every entry of `m` by ±step and compares the central difference
/// of `loss` with `analytic`. `m` is restored afterwards.
template <class F>
TensorCheck check_tensor(const std::string &name, Matrix<double> &m,
                         const Matrix<double> &analytic, F &&loss,
                         const GradCheckOptions &opt = {}) {
  if (!m.same_shape(analytic))
    throw ContractViolation("check_tensor: gradient for " + name + " is " +
                            analytic.shape() + ", tensor is " + m.shape());
  TensorCheck tc;
  tc.name = name;
  for (std::size_t k = 0; k < m.size(); ++k) {
    const double saved = m[k];
    m[k] = saved + opt.step;
    const double up = loss();
    m[k] = saved - opt.step;
    const double down = loss();
    m[k] = saved;
    const double fd = (up - down) / (2.0 * opt.step);
    const double e = relative_error(analytic[k], fd);
    if (e > tc.max_rel || tc.entries == 0) {
      tc.max_rel = e;
      tc.worst = k;
      tc.analytic = analytic[k];
      tc.numeric = fd;
    }
    ++tc.entries;
  }
  return tc;
}

// ---------------------------------------------------------------------------
// Cell level: loss = Σ G ⊙ H over all time-major rows.
// ---------------------------------------------------------------------------

struct CellInstance {
  CellParams<double> params;
  SeqBatch<double> x;
  Matrix<double> upstream;   // G
  DropoutMask<double> mask;  // fixed recurrent mask, identity when empty
};

struct CellInstanceShape {
  std::size_t max_units = 8;
  std::size_t max_input = 6;
  std::size_t max_steps = 12;
  std::size_t batch = 4;
};

/// Random parameters, ragged inputs and upstream weights for one check.
inline CellInstance random_cell_instance(CellKind kind, bool batch_norm,
                                         bool dropout, RngStream &rng,
                                         const CellInstanceShape &shape = {}) {
  const std::size_t n = 2 + rng.below(shape.max_units - 1);
  // With a single input feature, batch norm makes W scale-free: its gradient
  // is zero up to eps and the relative error is pure rounding noise.
  const std::size_t d = batch_norm ? 2 + rng.below(shape.max_input - 1)
                                   : 1 + rng.below(shape.max_input);
  const std::size_t T = 2 + rng.below(shape.max_steps - 1);
  const std::size_t B = shape.batch;

  InitOptions io;
  io.recurrent = RecurrentInit::glorot;
  CellInstance inst;
  inst.params = init_cell<double>(kind, d, n, batch_norm, rng, io);
  for (auto &b : inst.params.b)
    for (auto &v : b.values())
      v = rng.uniform(-0.5, 0.5);
  for (auto &s : inst.params.bn) {
    for (auto &v : s.gamma.values())
      v = rng.uniform(0.5, 1.5);
    for (auto &v : s.beta.values())
      v = rng.uniform(-0.5, 0.5);
  }

  std::vector<Matrix<double>> seqs;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = b == 0 ? T : 1 + rng.below(T);
    Matrix<double> s(len, d);
    for (auto &v : s.values())
      v = rng.normal();
    seqs.push_back(std::move(s));
  }
  inst.x = SeqBatch<double>::pack(seqs);
  inst.upstream = Matrix<double>(T * B, n);
  for (auto &v : inst.upstream.values())
    v = rng.normal();
  if (dropout)
    inst.mask = sample_dropout_mask<double>(B, n, 0.7, rng);
  return inst;
}

namespace detail {
inline bool near_kink(const Matrix<double> &pre, const std::vector<std::uint8_t> &valid,
                      double margin) {
  for (std::size_t r = 0; r < pre.rows(); ++r) {
    if (!valid[r])
      continue;
    for (double v : pre.row(r))
      if (std::abs(v) < margin)
        return true;
  }
  return false;
}

inline bool relu_candidate(CellKind k) {
  return k == CellKind::vanilla_relu || k == CellKind::ligru;
}
} // namespace detail

inline double cell_instance_loss(const CellInstance &inst) {
  CellParams<double> p = inst.params; // running statistics stay untouched
  const ForwardTrace<double> tr = sequence_forward(p, inst.x, Mode::train, inst.mask);
  double s = 0.0;
  for (std::size_t k = 0; k < tr.h.size(); ++k)
    s += inst.upstream[k] * tr.h[k];
  return s;
}

inline bool cell_instance_near_kink(const CellInstance &inst, double margin) {
  if (!detail::relu_candidate(inst.params.kind))
    return false;
  CellParams<double> p = inst.params;
  const ForwardTrace<double> tr = sequence_forward(p, inst.x, Mode::train, inst.mask);
  return detail::near_kink(tr.cand_pre, inst.x.row_mask(), margin);
}

/// Checks every parameter tensor and the input gradient of one instance.
inline GradCheckReport check_cell_instance(CellInstance &inst,
                                           const GradCheckOptions &opt = {}) {
  CellParams<double> p = inst.params;
  const ForwardTrace<double> tr = sequence_forward(p, inst.x, Mode::train, inst.mask);
  const CellGrads<double> g = sequence_backward(inst.params, tr, inst.upstream);

  GradCheckReport rep;
  const auto loss = [&] { return cell_instance_loss(inst); };
  std::vector<std::pair<std::string, Matrix<double> *>> mine;
  for_each_param(inst.params, [&](const std::string &name, Matrix<double> &m) {
    mine.emplace_back(name, &m);
  });
  std::size_t i = 0;
  for_each_param(g.params, [&](const std::string &, const Matrix<double> &a) {
    rep.tensors.push_back(check_tensor(mine[i].first, *mine[i].second, a, loss, opt));
    ++i;
  });
  rep.tensors.push_back(check_tensor("input", inst.x.data, g.d_input, loss, opt));
  return rep;
}

/// Draws instances until one clears the kink margin, then checks it.
inline GradCheckReport check_random_cell(CellKind kind, bool batch_norm, bool dropout,
                                         RngStream &rng, const GradCheckOptions &opt = {},
                                         const CellInstanceShape &shape = {}) {
  std::size_t redraws = 0;
  CellInstance inst = random_cell_instance(kind, batch_norm, dropout, rng, shape);
  while (cell_instance_near_kink(inst, opt.kink_margin)) {
    if (++redraws > opt.max_redraws)
      throw ComputeError("gradient check: no kink-free instance for " +
                         std::string(to_string(kind)) + " after " +
                         std::to_string(opt.max_redraws) + " draws");
    inst = random_cell_instance(kind, batch_norm, dropout, rng, shape);
  }
  GradCheckReport rep = check_cell_instance(inst, opt);
  rep.redraws = redraws;
  rep.label = std::string(to_string(kind)) + (batch_norm ? " bn" : "") +
              (dropout ? " dropout" : "") + " n=" +
              std::to_string(inst.params.units) + " d=" +
              std::to_string(inst.params.input_dim) + " T=" +
              std::to_string(inst.x.steps);
  return rep;
}

// ---------------------------------------------------------------------------
// Network level: full stack with a framewise or CTC head.
// ---------------------------------------------------------------------------

struct NetworkInstance {
  Network<double> net;
  SeqBatch<double> x;
  std::vector<int> frame_targets;
  std::vector<LabelSeq> label_targets;
  PassMasks<double> masks;
};

inline NetworkInstance random_network_instance(CellKind kind, HeadKind head,
                                               bool batch_norm, bool dropout,
                                               RngStream &rng) {
  NetworkInstance inst;
  StackConfig cfg;
  cfg.kind = kind;
  cfg.layers = 2;
  cfg.units = 3;
  cfg.bidirectional = true;
  cfg.batch_norm = batch_norm;
  cfg.keep_prob = dropout ? 0.7 : 1.0;
  const std::size_t d = 3, K = 3;
  const std::size_t out = head == HeadKind::ctc ? K + 1 : K;
  InitOptions io;
  io.recurrent = RecurrentInit::glorot;
  inst.net = Network<double>::create(cfg, head, d, out, rng, io);
  for_each_network_param(inst.net, [&](const std::string &, const std::string &base,
                                       Matrix<double> &m) {
    if (base.rfind("b_", 0) == 0 || base == "head.b" || base.rfind("beta_", 0) == 0)
      for (auto &v : m.values())
        v = rng.uniform(-0.5, 0.5);
    else if (base.rfind("gamma_", 0) == 0)
      for (auto &v : m.values())
        v = rng.uniform(0.5, 1.5);
  });

  const std::size_t B = 3, T = 6;
  std::vector<Matrix<double>> seqs;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = b == 0 ? T : 3 + rng.below(T - 2);
    Matrix<double> s(len, d);
    for (auto &v : s.values())
      v = rng.normal();
    seqs.push_back(std::move(s));
  }
  inst.x = SeqBatch<double>::pack(seqs);
  inst.frame_targets.assign(T * B, 0);
  for (auto &y : inst.frame_targets)
    y = static_cast<int>(rng.below(K));
  for (std::size_t b = 0; b < B; ++b) {
    LabelSeq l;
    const std::size_t len = 1 + rng.below(2);
    for (std::size_t i = 0; i < len; ++i)
      l.push_back(static_cast<int>(rng.below(K)));
    inst.label_targets.push_back(std::move(l));
  }
  inst.masks = sample_pass_masks(inst.net, inst.x, rng);
  return inst;
}

inline HeadResult<double> network_instance_head(const NetworkInstance &inst,
                                                const NetworkTrace<double> &tr) {
  if (inst.net.head == HeadKind::ctc)
    return ctc_head(tr.logits, inst.x, inst.label_targets);
  const auto mask = inst.x.row_mask();
  return softmax_ce_head(tr.logits, inst.frame_targets, RowMask(mask));
}

inline double network_instance_loss(const NetworkInstance &inst) {
  Network<double> net = inst.net;
  const NetworkTrace<double> tr = network_forward(net, inst.x, Mode::train, inst.masks);
  return network_instance_head(inst, tr).loss;
}

inline bool network_instance_near_kink(const NetworkInstance &inst, double margin) {
  if (!detail::relu_candidate(inst.net.config.kind))
    return false;
  Network<double> net = inst.net;
  const NetworkTrace<double> tr = network_forward(net, inst.x, Mode::train, inst.masks);
  for (const auto &lt : tr.layers)
    for (const auto &dir : lt.dirs) {
      SeqBatch<double> shape = inst.x;
      if (detail::near_kink(dir.cand_pre, shape.row_mask(), margin))
        return true;
    }
  return false;
}

inline GradCheckReport check_network_instance(NetworkInstance &inst,
                                              const GradCheckOptions &opt = {}) {
  Network<double> net = inst.net;
  const NetworkTrace<double> tr = network_forward(net, inst.x, Mode::train, inst.masks);
  const HeadResult<double> hr = network_instance_head(inst, tr);
  Matrix<double> d_input;
  const Network<double> g = network_backward(inst.net, tr, hr.d_logits, &d_input);

  GradCheckReport rep;
  const auto loss = [&] { return network_instance_loss(inst); };
  std::vector<std::pair<std::string, Matrix<double> *>> mine;
  for_each_network_param(inst.net, [&](const std::string &name, const std::string &,
                                       Matrix<double> &m) { mine.emplace_back(name, &m); });
  std::size_t i = 0;
  for_each_network_param(g, [&](const std::string &, const std::string &,
                                const Matrix<double> &a) {
    rep.tensors.push_back(check_tensor(mine[i].first, *mine[i].second, a, loss, opt));
    ++i;
  });
  rep.tensors.push_back(check_tensor("input", inst.x.data, d_input, loss, opt));
  return rep;
}

inline GradCheckReport check_random_network(CellKind kind, HeadKind head, bool batch_norm,
                                            bool dropout, RngStream &rng,
                                            const GradCheckOptions &opt = {}) {
  std::size_t redraws = 0;
  NetworkInstance inst = random_network_instance(kind, head, batch_norm, dropout, rng);
  while (network_instance_near_kink(inst, opt.kink_margin)) {
    if (++redraws > opt.max_redraws)
      throw ComputeError("gradient check: no kink-free network for " +
                         std::string(to_string(kind)));
    inst = random_network_instance(kind, head, batch_norm, dropout, rng);
  }
  GradCheckReport rep = check_network_instance(inst, opt);
  rep.redraws = redraws;
  rep.label = "network " + std::string(to_string(kind)) +
              (head == HeadKind::ctc ? " ctc" : " framewise") +
              (batch_norm ? " bn" : "") + (dropout ? " dropout" : "");
  return rep;
}

// ---------------------------------------------------------------------------
// CTC: gradient of the loss with respect to free log-probability inputs.
// ---------------------------------------------------------------------------

inline GradCheckReport check_ctc_inputs(std::size_t labels, std::size_t frames,
                                        const LabelSeq &target, RngStream &rng,
                                        const GradCheckOptions &opt = {}) {
  Matrix<double> logits(frames, labels + 1);
  for (auto &v : logits.values())
    v = rng.normal();
  Matrix<double> lp = log_softmax(logits);
  const CtcResult<double> res = ctc_loss(lp, target);
  GradCheckReport rep;
  rep.label = "ctc K=" + std::to_string(labels) + " T=" + std::to_string(frames) +
              " |l|=" + std::to_string(target.size());
  rep.tensors.push_back(check_tensor(
      "log_probs", lp, res.grad, [&] { return ctc_loss(lp, target).loss; }, opt));
  return rep;
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

struct GradCheckSuite {
  std::vector<GradCheckReport> reports;
  double seconds = 0.0;
  double tolerance = 1e-4;

  bool passed() const {
    return std::all_of(reports.begin(), reports.end(),
                       [&](const auto &r) { return r.passed(tolerance); });
  }
  double max_rel() const {
    double m = 0.0;
    for (const auto &r : reports)
      m = std::max(m, r.max_rel());
    return m;
  }
};

/// `instances` cell checks per kind (batch norm on every other instance,
/// fixed dropout masks on every third).
inline GradCheckSuite cell_gradcheck_suite(std::uint64_t seed, std::size_t instances = 10,
                                           const GradCheckOptions &opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckSuite s;
  s.tolerance = opt.tolerance;
  RngStream rng(seed);
  for (CellKind k : kAllCellKinds)
    for (std::size_t i = 0; i < instances; ++i)
      s.reports.push_back(check_random_cell(k, i % 2 == 1, i % 3 == 2, rng, opt));
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return s;
}

/// Cell suite plus two-layer bidirectional networks with both heads and
/// CTC input gradients.
inline GradCheckSuite full_gradcheck_suite(std::uint64_t seed, std::size_t instances = 10,
                                           const GradCheckOptions &opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckSuite s = cell_gradcheck_suite(seed, instances, opt);
  RngStream rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (CellKind k : kAllCellKinds)
    for (HeadKind h : {HeadKind::framewise, HeadKind::ctc})
      s.reports.push_back(check_random_network(k, h, k == CellKind::ligru, false, rng, opt));
  s.reports.push_back(
      check_random_network(CellKind::gru, HeadKind::framewise, true, true, rng, opt));
  for (std::size_t K = 1; K <= 3; ++K)
    for (std::size_t T = 1; T <= 6; ++T) {
      LabelSeq target;
      const std::size_t len = 1 + rng.below(3);
      for (std::size_t i = 0; i < len; ++i)
        target.push_back(static_cast<int>(rng.below(K)));
      while (ctc_min_frames(target) > T)
        target.pop_back();
      s.reports.push_back(check_ctc_inputs(K, T, target, rng, opt));
    }
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return s;
}

} // namespace ligru
