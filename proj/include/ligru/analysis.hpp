// SPDX-License-Identifier: Apache-2.0
/**
 * @file   analysis.hpp
 * @brief  Gate cross-correlation, gradient-norm statistics and parameter
 *         counting.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "cells.hpp"
#include "data.hpp"
#include "network.hpp"
#include "numeric.hpp"
#include "trainer.hpp"

namespace ligru {

/// Raw sliding dot product C(k) = Σ_t a[t + k] · b[t] for k in
/// [−max_lag, max_lag], zero outside the series. Index k + max_lag holds lag
/// k. When b is a copy of a delayed by d frames, the peak sits at k = −d.
inline std::vector<double> cross_correlation(const std::vector<double> &a,
                                             const std::vector<double> &b,
                                             std::size_t max_lag) {
  if (a.empty() || b.empty())
    throw ContractViolation("cross_correlation: empty series");
  if (a.size() != b.size())
    throw ContractViolation("cross_correlation: series lengths differ (" +
                            std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
  const auto L = static_cast<long>(a.size());
  const auto M = static_cast<long>(max_lag);
  std::vector<double> out(2 * max_lag + 1, 0.0);
  for (long k = -M; k <= M; ++k) {
    double s = 0.0;
    for (long t = std::max(0L, -k); t < L && t + k < L; ++t)
      s += a[static_cast<std::size_t>(t + k)] * b[static_cast<std::size_t>(t)];
    out[static_cast<std::size_t>(k + M)] = s;
  }
  return out;
}

/// Neuron-averaged update and reset gate activations of one utterance.
struct GateTrace {
  std::string id;
  std::vector<double> z;
  std::vector<double> r;
};

struct CorrelationReport {
  std::vector<long> lags;
  std::vector<double> czr; // averaged over utterances
  std::vector<double> czz;
  double normalized_peak = 0.0; // max C(z,r) / max C(z,z)
  long peak_lag = 0;            // lag of max C(z,r)
  bool czz_peaks_at_zero = true; // held for every utterance
  // Cauchy-Schwarz ceiling for normalized_peak: Σ_u sqrt(E_z·E_r) / Σ_u E_z
  // with E the per-utterance energies. Equals 1 when z and r coincide.
  double peak_bound = 1.0;
  std::size_t utterances = 0;

  std::vector<double> normalized(const std::vector<double> &c) const {
    const double m = *std::max_element(czz.begin(), czz.end());
    std::vector<double> out(c);
    for (auto &v : out)
      v = m > 0.0 ? v / m : 0.0;
    return out;
  }

  /// Plot-ready series: "lag<TAB>C(z,r)<TAB>C(z,z)", normalized by max C(z,z).
  void write_series(std::ostream &os) const {
    const auto zr = normalized(czr), zz = normalized(czz);
    os.precision(10);
    for (std::size_t i = 0; i < lags.size(); ++i)
      os << lags[i] << '\t' << zr[i] << '\t' << zz[i] << '\n';
  }
};

namespace detail {
inline std::vector<double> centered(const std::vector<double> &v, bool on) {
  if (!on)
    return v;
  double m = 0.0;
  for (double x : v)
    m += x;
  m /= static_cast<double>(v.size());
  std::vector<double> out(v);
  for (auto &x : out)
    x -= m;
  return out;
}
} // namespace detail

/// Per-utterance C(z,r) and C(z,z), averaged lag by lag over utterances.
/// max_lag = 0 selects min(longest utterance − 1, 200).
inline CorrelationReport correlation_report(const std::vector<GateTrace> &traces,
                                            std::size_t max_lag = 0,
                                            bool mean_removed = false) {
  if (traces.empty())
    throw ContractViolation("correlation_report: no utterances");
  if (max_lag == 0) {
    std::size_t longest = 0;
    for (const auto &g : traces)
      longest = std::max(longest, g.z.size());
    max_lag = std::min<std::size_t>(longest ? longest - 1 : 0, 200);
  }
  CorrelationReport rep;
  const std::size_t width = 2 * max_lag + 1;
  rep.czr.assign(width, 0.0);
  rep.czz.assign(width, 0.0);
  for (std::size_t i = 0; i < width; ++i)
    rep.lags.push_back(static_cast<long>(i) - static_cast<long>(max_lag));

  double bound_num = 0.0, bound_den = 0.0;
  for (const auto &g : traces) {
    const auto z = detail::centered(g.z, mean_removed);
    const auto r = detail::centered(g.r, mean_removed);
    if (z.size() != r.size())
      throw ContractViolation("correlation_report: z and r lengths differ for " + g.id);
    double ez = 0.0, er = 0.0;
    for (std::size_t t = 0; t < z.size(); ++t) {
      ez += z[t] * z[t];
      er += r[t] * r[t];
    }
    bound_num += std::sqrt(ez * er);
    bound_den += ez;
    const auto zr = cross_correlation(z, r, max_lag);
    const auto zz = cross_correlation(z, z, max_lag);
    const auto peak = std::max_element(zz.begin(), zz.end()) - zz.begin();
    // ties with lag 0 count as a lag-0 peak
    if (zz[static_cast<std::size_t>(peak)] > zz[max_lag])
      rep.czz_peaks_at_zero = false;
    for (std::size_t i = 0; i < width; ++i) {
      rep.czr[i] += zr[i];
      rep.czz[i] += zz[i];
    }
  }
  const double n = static_cast<double>(traces.size());
  for (std::size_t i = 0; i < width; ++i) {
    rep.czr[i] /= n;
    rep.czz[i] /= n;
  }
  rep.utterances = traces.size();
  rep.peak_bound = bound_den > 0.0 ? bound_num / bound_den : 0.0;
  const auto zr_peak = std::max_element(rep.czr.begin(), rep.czr.end());
  const double zz_max = *std::max_element(rep.czz.begin(), rep.czz.end());
  rep.normalized_peak = zz_max > 0.0 ? *zr_peak / zz_max : 0.0;
  rep.peak_lag = rep.lags[static_cast<std::size_t>(zr_peak - rep.czr.begin())];
  return rep;
}

/// Update/reset gate series of one layer, averaged over the neurons of all
/// directions at each original time step. Runs in eval mode.
template <class T>
std::vector<GateTrace> collect_gate_traces(Network<T> &net, const Dataset<T> &data,
                                           std::size_t layer = 0,
                                           std::size_t batch_size = 8) {
  if (!has_reset_gate(net.config.kind))
    throw ContractViolation("gate analysis needs a cell with a reset gate, got " +
                            std::string(to_string(net.config.kind)));
  if (layer >= net.layers.size())
    throw ContractViolation("gate analysis: layer out of range");
  std::vector<GateTrace> out(data.size());
  const BatchPlan plan = build_batch_plan(data.lengths(), batch_size);
  for (const auto &idx : plan.batches) {
    const Minibatch<T> mb = make_minibatch(data, idx);
    const NetworkTrace<T> tr = network_forward(net, mb.x, Mode::eval);
    const LayerTrace<T> &lt = tr.layers[layer];
    const std::size_t n = net.config.units;
    const double denom = static_cast<double>(n * lt.dirs.size());
    for (std::size_t b = 0; b < mb.x.batch; ++b) {
      GateTrace g;
      g.id = data.ids[idx[b]];
      const std::size_t L = mb.x.lengths[b];
      g.z.assign(L, 0.0);
      g.r.assign(L, 0.0);
      for (std::size_t d = 0; d < lt.dirs.size(); ++d)
        for (std::size_t t = 0; t < L; ++t) {
          const std::size_t src = d == 0 ? t : L - 1 - t;
          const std::size_t row = mb.x.row(src, b);
          for (std::size_t j = 0; j < n; ++j) {
            g.z[t] += static_cast<double>(lt.dirs[d].gates[0](row, j));
            g.r[t] += static_cast<double>(lt.dirs[d].gates[1](row, j));
          }
        }
      for (std::size_t t = 0; t < L; ++t) {
        g.z[t] /= denom;
        g.r[t] /= denom;
      }
      out[idx[b]] = std::move(g);
    }
  }
  return out;
}

template <class T>
CorrelationReport gate_redundancy_report(Network<T> &net, const Dataset<T> &data,
                                         std::size_t max_lag = 0,
                                         bool mean_removed = false) {
  return correlation_report(collect_gate_traces(net, data), max_lag, mean_removed);
}

/// Average L2 gradient norm per base parameter name (W_h, U_z, ...), pooled
/// over layers and directions within each minibatch.
class GradNormAccumulator {
public:
  template <class T> void add(const Network<T> &grads) {
    std::map<std::string, double> sq;
    for_each_network_param(grads, [&](const std::string &, const std::string &base,
                                      const Matrix<T> &g) {
      sq[base] += static_cast<double>(squared_norm(g));
      if (std::find(order_.begin(), order_.end(), base) == order_.end())
        order_.push_back(base);
    });
    for (auto &[k, v] : sq)
      sums_[k] += std::sqrt(v);
    ++batches_;
  }

  std::size_t batches() const { return batches_; }

  double mean(const std::string &name) const {
    auto it = sums_.find(name);
    if (it == sums_.end() || batches_ == 0)
      return 0.0;
    return it->second / static_cast<double>(batches_);
  }

  bool has(const std::string &name) const { return sums_.count(name) != 0; }

  /// (name, mean norm) rows: W_h, W_z, W_r, U_h, U_z, U_r first where
  /// present, then the rest in visiting order.
  std::vector<std::pair<std::string, double>> table() const {
    static const std::vector<std::string> lead{"W_h", "W_z", "W_r",
                                               "U_h", "U_z", "U_r"};
    std::vector<std::pair<std::string, double>> rows;
    for (const auto &n : lead)
      if (has(n))
        rows.emplace_back(n, mean(n));
    for (const auto &n : order_)
      if (std::find(lead.begin(), lead.end(), n) == lead.end())
        rows.emplace_back(n, mean(n));
    return rows;
  }

private:
  std::map<std::string, double> sums_;
  std::vector<std::string> order_;
  std::size_t batches_ = 0;
};

/// Trains `trainer` for `epochs` epochs and averages every minibatch
/// gradient norm over all batches and epochs.
template <class T>
GradNormAccumulator gradient_norms(Trainer<T> &trainer, const Dataset<T> &train,
                                   const Dataset<T> &dev, std::size_t epochs) {
  GradNormAccumulator acc;
  auto previous = std::move(trainer.on_gradients);
  trainer.on_gradients = [&](const Network<T> &g) {
    acc.add(g);
    if (previous)
      previous(g);
  };
  try {
    trainer.train_epochs(train, dev, epochs);
  } catch (...) {
    trainer.on_gradients = std::move(previous);
    throw;
  }
  trainer.on_gradients = std::move(previous);
  return acc;
}

template <class T>
GradNormAccumulator gradient_norms(const RunConfig &cfg, const Dataset<T> &train,
                                   const Dataset<T> &dev, std::size_t epochs) {
  Trainer<T> trainer(cfg, train.dim, output_dim_for(cfg, train));
  trainer.out_dir.clear();
  return gradient_norms(trainer, train, dev, epochs);
}

/// Trainable parameter counts with a per-(layer, gate) breakdown.
struct ParamCount {
  struct Group {
    std::string name; // e.g. "l0.r" (both directions) or "head"
    std::size_t layer = 0;
    std::string gate;
    std::size_t weights = 0; // W + U entries
    std::size_t biases = 0;
    std::size_t norm = 0;    // γ and β
    std::size_t total() const { return weights + biases + norm; }
  };
  std::vector<Group> groups;
  std::size_t total = 0;

  std::size_t gate_total(const std::string &gate) const {
    std::size_t n = 0;
    for (const auto &g : groups)
      if (g.gate == gate)
        n += g.total();
    return n;
  }
};

/// Exact count for a stack: each gate has W (in × units), U (units ×
/// units), a bias unless it is a batch-normalized Li-GRU, and γ/β when batch
/// norm is on. Bidirectional stacks double every layer; layers past the
/// first see directions × units inputs. output_dim = 0 omits the head.
inline ParamCount param_count(const StackConfig &cfg, std::size_t input_dim,
                              std::size_t output_dim) {
  cfg.validate();
  ParamCount pc;
  const std::size_t n = cfg.units;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = l == 0 ? input_dim : cfg.output_width();
    for (auto gate : gate_names(cfg.kind)) {
      ParamCount::Group g;
      g.layer = l;
      g.gate = std::string(gate);
      g.name = "l" + std::to_string(l) + "." + g.gate;
      g.weights = cfg.directions() * (in * n + n * n);
      g.biases = cell_uses_bias(cfg.kind, cfg.batch_norm) ? cfg.directions() * n : 0;
      g.norm = cfg.batch_norm ? cfg.directions() * 2 * n : 0;
      pc.total += g.total();
      pc.groups.push_back(std::move(g));
    }
  }
  if (output_dim) {
    ParamCount::Group h;
    h.name = "head";
    h.layer = cfg.layers;
    h.gate = "head";
    h.weights = cfg.output_width() * output_dim;
    h.biases = output_dim;
    pc.total += h.total();
    pc.groups.push_back(std::move(h));
  }
  return pc;
}

} // namespace ligru
