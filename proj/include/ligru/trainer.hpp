// SPDX-License-Identifier: Apache-2.0
/**
 * @file   trainer.hpp
 * @brief  Epoch loop: length-sorted minibatches, dropout and weight noise,
 *         Adam updates, dev evaluation, learning-rate halving, logging and
 *         checkpoints.
 */
#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "ctc.hpp"
#include "data.hpp"
#include "network.hpp"
#include "optim.hpp"
#include "rng.hpp"

namespace ligru {

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_metric = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
  double dev_loss = 0.0;
};

/// One tab-separated log line: epoch, train-loss, dev-metric, lr, seconds.
inline std::string format_log_line(const EpochRecord &r) {
  std::ostringstream os;
  os.precision(10);
  os << r.epoch << '\t' << r.train_loss << '\t' << r.dev_metric << '\t' << r.lr
     << '\t' << r.seconds;
  return os.str();
}

struct EvalResult {
  double loss = 0.0;   // mean per frame (framewise) or per sequence (CTC)
  double metric = 0.0; // frame error rate, or label error rate after mapping
  double loss_sum = 0.0;
  std::size_t frames = 0;
  std::size_t errors = 0;
  std::size_t reference = 0; // frames, or reference labels
};

/// Output classes implied by the configuration and training targets.
template <class T>
std::size_t output_dim_for(const RunConfig &cfg, const Dataset<T> &train) {
  const std::size_t k =
      cfg.classes ? cfg.classes : static_cast<std::size_t>(train.label_count());
  if (k == 0)
    throw ConfigError({"classes: cannot infer from empty targets"});
  return cfg.head == HeadKind::ctc ? k + 1 : k;
}

template <class T> struct BatchLoss {
  T loss = T(0);
  Matrix<T> d_logits;
  std::size_t frames = 0;
};

template <class T>
BatchLoss<T> head_loss(const Network<T> &net, const NetworkTrace<T> &tr,
                       const Minibatch<T> &mb) {
  BatchLoss<T> out;
  out.frames = mb.x.valid_frames();
  if (net.head == HeadKind::ctc) {
    auto r = ctc_head(tr.logits, mb.x, mb.label_targets);
    out.loss = r.loss;
    out.d_logits = std::move(r.d_logits);
  } else {
    const auto mask = mb.x.row_mask();
    auto r = softmax_ce_head(tr.logits, mb.frame_targets, RowMask(mask));
    out.loss = r.loss;
    out.d_logits = std::move(r.d_logits);
  }
  return out;
}

template <class T> class Trainer {
public:
  RunConfig config;
  Network<T> net;
  AdamState<T> adam;
  LrSchedule schedule;
  RngStream rng;
  std::size_t epoch = 0;
  double best_metric = std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> history;
  std::optional<LabelMap> label_map;

  /// Called with the gradients of every minibatch.
  std::function<void(const Network<T> &)> on_gradients;
  /// Directory for "train.log", "last.ckpt" and "best.ckpt"; empty disables.
  std::string out_dir;

  Trainer() = default;

  Trainer(const RunConfig &cfg, std::size_t input_dim, std::size_t output_dim)
      : config(cfg), rng(cfg.seed) {
    cfg.validate();
    net = Network<T>::create(cfg.stack(), cfg.head, input_dim, output_dim, rng,
                             cfg.init_options());
    adam.lr = cfg.lr;
    schedule.lr = cfg.lr;
    schedule.threshold = cfg.lr_threshold;
    load_label_map();
  }

  void load_label_map() {
    if (!config.label_map.empty())
      label_map = LabelMap::read(config.label_map);
  }

  /// One pass over the length-sorted plan. Returns the mean training loss
  /// (per frame for framewise heads, per sequence for CTC).
  double train_one_epoch(const Dataset<T> &data) {
    BatchPlan plan = build_batch_plan(data.lengths(), config.batch_size);
    if (config.reshuffle)
      for (std::size_t i = plan.batches.size(); i > 1; --i)
        std::swap(plan.batches[i - 1], plan.batches[rng.below(i)]);

    const WeightNoiseConfig noise{config.weight_noise, config.weight_noise > 0.0};
    double total = 0.0;
    std::size_t denom = 0;
    for (std::size_t bi = 0; bi < plan.batches.size(); ++bi) {
      const auto &idx = plan.batches[bi];
      const Minibatch<T> mb = make_minibatch(data, idx);
      const PassMasks<T> masks = sample_pass_masks(net, mb.x, rng);

      Network<T> noisy;
      Network<T> *work = &net;
      if (noise.enabled) {
        noisy = apply_weight_noise(net, noise, rng);
        work = &noisy;
      }
      const NetworkTrace<T> tr = network_forward(*work, mb.x, Mode::train, masks);
      BatchLoss<T> bl;
      try {
        bl = head_loss(*work, tr, mb);
      } catch (const ComputeError &e) {
        throw ComputeError(describe_batch(data, idx, bi) + ": " + e.what());
      }
      if (!std::isfinite(static_cast<double>(bl.loss)) || !all_finite(tr.logits))
        throw ComputeError(describe_batch(data, idx, bi) + ": non-finite loss");
      const Network<T> grads = network_backward(*work, tr, bl.d_logits);
      if (noise.enabled)
        copy_buffers(noisy, net);
      if (on_gradients)
        on_gradients(grads);

      auto slots = param_slots(net, grads);
      try {
        adam_step(slots, adam);
      } catch (const ComputeError &e) {
        throw ComputeError(describe_batch(data, idx, bi) + ": " + e.what());
      }

      if (net.head == HeadKind::ctc) {
        total += static_cast<double>(bl.loss);
        denom += idx.size();
      } else {
        total += static_cast<double>(bl.loss) * static_cast<double>(bl.frames);
        denom += bl.frames;
      }
    }
    return denom ? total / static_cast<double>(denom) : 0.0;
  }

  EvalResult evaluate(const Dataset<T> &data) {
    EvalResult res;
    if (data.size() == 0)
      return res;
    const BatchPlan plan = build_batch_plan(data.lengths(), config.batch_size);
    double loss = 0.0;
    for (const auto &idx : plan.batches) {
      const Minibatch<T> mb = make_minibatch(data, idx);
      const NetworkTrace<T> tr = network_forward(net, mb.x, Mode::eval);
      const BatchLoss<T> bl = head_loss(net, tr, mb);
      res.frames += bl.frames;
      if (net.head == HeadKind::ctc) {
        loss += static_cast<double>(bl.loss);
        for (std::size_t b = 0; b < mb.x.batch; ++b) {
          const auto hyp = best_path_decode(log_softmax(mb.x.unpack(tr.logits, b)));
          const auto &ref = mb.label_targets[b];
          if (label_map) {
            res.errors += edit_distance(map_labels(hyp, *label_map),
                                        map_labels(ref, *label_map));
            res.reference += map_labels(ref, *label_map).size();
          } else {
            res.errors += edit_distance(hyp, ref);
            res.reference += ref.size();
          }
        }
      } else {
        loss += static_cast<double>(bl.loss) * static_cast<double>(bl.frames);
        for (std::size_t b = 0; b < mb.x.batch; ++b)
          for (std::size_t t = 0; t < mb.x.lengths[b]; ++t) {
            const std::size_t r = mb.x.row(t, b);
            const auto row = tr.logits.row(r);
            const int best = static_cast<int>(
                std::max_element(row.begin(), row.end()) - row.begin());
            res.errors += best != mb.frame_targets[r];
          }
        res.reference += bl.frames;
      }
    }
    res.loss_sum = loss;
    res.loss = net.head == HeadKind::ctc ? loss / static_cast<double>(data.size())
                                         : loss / static_cast<double>(res.frames);
    res.metric = res.reference ? static_cast<double>(res.errors) /
                                     static_cast<double>(res.reference)
                               : 0.0;
    return res;
  }

  /// Trains `epochs` more epochs, evaluating on `dev` (or on the training
  /// data when dev is empty) after each one.
  void train_epochs(const Dataset<T> &train, const Dataset<T> &dev,
                    std::size_t epochs) {
    for (std::size_t e = 0; e < epochs; ++e) {
      const auto start = std::chrono::steady_clock::now();
      EpochRecord rec;
      rec.train_loss = train_one_epoch(train);
      rec.seconds = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - start)
                        .count();
      const EvalResult ev = evaluate(dev.size() ? dev : train);
      rec.dev_metric = ev.metric;
      rec.dev_loss = ev.loss;
      rec.lr = adam.lr;
      rec.epoch = ++epoch;
      adam.lr = schedule.update(ev.metric);
      history.push_back(rec);
      const bool improved = rec.dev_metric < best_metric;
      if (improved)
        best_metric = rec.dev_metric;
      write_outputs(rec, improved);
    }
  }

  std::vector<ParamSlot<T>> param_slots(Network<T> &target, const Network<T> &grads) {
    std::vector<ParamSlot<T>> slots;
    for_each_network_param(target, [&](const std::string &name, const std::string &,
                                       Matrix<T> &m) {
      slots.push_back({name, &m, nullptr});
    });
    std::size_t i = 0;
    for_each_network_param(grads, [&](const std::string &, const std::string &,
                                      const Matrix<T> &g) { slots[i++].grad = &g; });
    return slots;
  }

private:
  static void copy_buffers(const Network<T> &from, Network<T> &to) {
    std::vector<const Matrix<T> *> src;
    for_each_network_buffer(from, [&](const std::string &, const Matrix<T> &m) {
      src.push_back(&m);
    });
    std::size_t i = 0;
    for_each_network_buffer(to, [&](const std::string &, Matrix<T> &m) { m = *src[i++]; });
  }

  std::string describe_batch(const Dataset<T> &data,
                             const std::vector<std::size_t> &idx,
                             std::size_t bi) const {
    std::string s = "epoch " + std::to_string(epoch + 1) + ", batch " +
                    std::to_string(bi) + " [";
    for (std::size_t k = 0; k < idx.size(); ++k)
      s += (k ? " " : "") + data.ids[idx[k]];
    return s + "]";
  }

  void write_outputs(const EpochRecord &rec, bool improved);
};

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "LGCK"  u32 version (1)
//   u32 config_len, config text (key = value lines)
//   u64 epoch, f64 best_metric, u32 input_dim, u32 output_dim
//   tensors:  u32 count, count × { u16 name_len, name, u32 rows, u32 cols,
//             rows × cols × f64 }     parameters then buffers
//   adam:     f64 lr, u64 step, u32 count, moment tensors m then v
//   schedule: f64 lr, f64 threshold, u64 halvings, u32 n, n × f64 history
//   rng:      u64 seed, 4 × u64 state
//   history:  u32 n, n × { u64 epoch, f64 train_loss, f64 dev_metric,
//             f64 lr, f64 dev_loss }
//
// All numbers little-endian; tensors are stored as 64-bit reals whatever the
// training precision. Wall-clock times are not stored, so identical runs
// produce identical files.
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void put_tensor(std::string &out, const std::string &name, const Matrix<T> &m) {
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (T v : m.values())
    put_u64(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
}

inline void put_f64(std::string &out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

template <class T>
void get_tensor(ByteReader &in, const std::string &expect, Matrix<T> &m) {
  const std::string name = in.str(in.u16("tensor name length"), "tensor name");
  if (name != expect)
    throw ArchiveError(ArchiveErrorKind::dimension,
                       "checkpoint: expected tensor '" + expect + "', found '" +
                           name + "'",
                       in.offset());
  const auto rows = in.u32("tensor rows");
  const auto cols = in.u32("tensor cols");
  if (rows != m.rows() || cols != m.cols())
    throw ArchiveError(ArchiveErrorKind::dimension,
                       "checkpoint: tensor '" + name + "' is " +
                           std::to_string(rows) + "x" + std::to_string(cols) +
                           ", model expects " + m.shape(),
                       in.offset());
  for (auto &v : m.values())
    v = static_cast<T>(in.f64("tensor data"));
}
} // namespace detail

template <class T> std::string encode_checkpoint(const Trainer<T> &tr) {
  using namespace detail;
  std::string out = "LGCK";
  put_u32(out, 1);
  const std::string cfg = tr.config.to_text();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  put_u64(out, tr.epoch);
  put_f64(out, tr.best_metric);
  put_u32(out, static_cast<std::uint32_t>(tr.net.input_dim));
  put_u32(out, static_cast<std::uint32_t>(tr.net.output_dim));

  std::uint32_t count = 0;
  for_each_network_param(tr.net, [&](const auto &, const auto &, const auto &) { ++count; });
  for_each_network_buffer(tr.net, [&](const auto &, const auto &) { ++count; });
  put_u32(out, count);
  for_each_network_param(tr.net, [&](const std::string &name, const std::string &,
                                     const Matrix<T> &m) { put_tensor(out, name, m); });
  for_each_network_buffer(tr.net, [&](const std::string &name, const Matrix<T> &m) {
    put_tensor(out, name, m);
  });

  put_f64(out, tr.adam.lr);
  put_u64(out, tr.adam.step);
  put_u32(out, static_cast<std::uint32_t>(tr.adam.m.size()));
  for (std::size_t i = 0; i < tr.adam.m.size(); ++i)
    put_tensor(out, "adam.m." + std::to_string(i), tr.adam.m[i]);
  for (std::size_t i = 0; i < tr.adam.v.size(); ++i)
    put_tensor(out, "adam.v." + std::to_string(i), tr.adam.v[i]);

  put_f64(out, tr.schedule.lr);
  put_f64(out, tr.schedule.threshold);
  put_u64(out, tr.schedule.halvings);
  put_u32(out, static_cast<std::uint32_t>(tr.schedule.history.size()));
  for (double h : tr.schedule.history)
    put_f64(out, h);

  put_u64(out, tr.rng.seed());
  for (auto s : tr.rng.state())
    put_u64(out, s);

  put_u32(out, static_cast<std::uint32_t>(tr.history.size()));
  for (const auto &r : tr.history) {
    put_u64(out, r.epoch);
    put_f64(out, r.train_loss);
    put_f64(out, r.dev_metric);
    put_f64(out, r.lr);
    put_f64(out, r.dev_loss);
  }
  return out;
}

/// Reads only the configuration echo of a checkpoint.
inline RunConfig checkpoint_config(const std::string &bytes) {
  detail::ByteReader in(bytes);
  if (in.str(4, "magic") != "LGCK")
    throw ArchiveError(ArchiveErrorKind::bad_magic, "checkpoint: bad magic", 0);
  if (const auto v = in.u32("version"); v != 1)
    throw ArchiveError(ArchiveErrorKind::bad_version,
                       "checkpoint: unsupported version " + std::to_string(v), 4);
  std::istringstream cfg(in.str(in.u32("config length"), "config"));
  return RunConfig::parse(cfg, "checkpoint config");
}

template <class T> Trainer<T> decode_checkpoint(const std::string &bytes) {
  using namespace detail;
  RunConfig cfg = checkpoint_config(bytes);
  ByteReader in(bytes);
  in.str(8, "header");
  in.str(in.u32("config length"), "config");
  const std::uint64_t epoch = in.u64("epoch");
  const double best = in.f64("best metric");
  const auto input_dim = in.u32("input dim");
  const auto output_dim = in.u32("output dim");

  // Build the architecture, then overwrite every tensor.
  Trainer<T> tr(cfg, input_dim, output_dim);
  tr.epoch = epoch;
  tr.best_metric = best;
  const auto count = in.u32("tensor count");
  std::uint32_t expected = 0;
  for_each_network_param(tr.net, [&](const auto &, const auto &, const auto &) { ++expected; });
  for_each_network_buffer(tr.net, [&](const auto &, const auto &) { ++expected; });
  if (count != expected)
    throw ArchiveError(ArchiveErrorKind::dimension,
                       "checkpoint: " + std::to_string(count) + " tensors, model has " +
                           std::to_string(expected),
                       in.offset());
  for_each_network_param(tr.net, [&](const std::string &name, const std::string &,
                                     Matrix<T> &m) { get_tensor(in, name, m); });
  for_each_network_buffer(tr.net, [&](const std::string &name, Matrix<T> &m) {
    get_tensor(in, name, m);
  });

  tr.adam.lr = in.f64("adam lr");
  tr.adam.step = in.u64("adam step");
  const auto moments = in.u32("adam tensor count");
  std::vector<Matrix<T> *> shapes;
  for_each_network_param(tr.net, [&](const auto &, const auto &, Matrix<T> &m) {
    shapes.push_back(&m);
  });
  if (moments != 0 && moments != shapes.size())
    throw ArchiveError(ArchiveErrorKind::dimension,
                       "checkpoint: optimizer tracks " + std::to_string(moments) +
                           " tensors",
                       in.offset());
  tr.adam.m.clear();
  tr.adam.v.clear();
  for (std::uint32_t i = 0; i < moments; ++i) {
    tr.adam.m.emplace_back(shapes[i]->rows(), shapes[i]->cols());
    get_tensor(in, "adam.m." + std::to_string(i), tr.adam.m.back());
  }
  for (std::uint32_t i = 0; i < moments; ++i) {
    tr.adam.v.emplace_back(shapes[i]->rows(), shapes[i]->cols());
    get_tensor(in, "adam.v." + std::to_string(i), tr.adam.v.back());
  }

  tr.schedule.lr = in.f64("schedule lr");
  tr.schedule.threshold = in.f64("schedule threshold");
  tr.schedule.halvings = in.u64("schedule halvings");
  tr.schedule.history.resize(in.u32("schedule history"));
  for (auto &h : tr.schedule.history)
    h = in.f64("schedule history");

  const std::uint64_t seed = in.u64("rng seed");
  RngStream::State st;
  for (auto &s : st)
    s = in.u64("rng state");
  tr.rng.reseed(seed);
  tr.rng.set_state(st);

  tr.history.resize(in.u32("history length"));
  for (auto &r : tr.history) {
    r.epoch = in.u64("history epoch");
    r.train_loss = in.f64("history loss");
    r.dev_metric = in.f64("history metric");
    r.lr = in.f64("history lr");
    r.dev_loss = in.f64("history dev loss");
  }
  if (!in.done())
    throw ArchiveError(ArchiveErrorKind::dimension,
                       "checkpoint: trailing bytes at offset " + std::to_string(in.offset()),
                       in.offset());
  return tr;
}

template <class T> void save_checkpoint(const std::string &path, const Trainer<T> &tr) {
  detail::write_file(path, encode_checkpoint(tr));
}

template <class T> Trainer<T> load_checkpoint(const std::string &path) {
  return decode_checkpoint<T>(detail::read_file(path));
}

template <class T>
void Trainer<T>::write_outputs(const EpochRecord &rec, bool improved) {
  if (out_dir.empty())
    return;
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  {
    std::ofstream log(dir / "train.log", std::ios::app);
    log << format_log_line(rec) << '\n';
  }
  save_checkpoint((dir / "last.ckpt").string(), *this);
  if (improved)
    save_checkpoint((dir / "best.ckpt").string(), *this);
}

} // namespace ligru
