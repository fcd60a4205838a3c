// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Feature archives, target files, synthetic corpora and minibatch
 *         assembly.
 *
 * Feature archive layout (all integers little-endian):
 *
 *   "LGRU"  u32 version (1)  u32 dim  u32 count
 *   count × { u16 id_len, id bytes, u32 frames, frames × dim × f32 }
 *
 * Target files are text, one utterance per line:
 *
 *   <id> <t1> <t2> ...        framewise class ids, one per frame
 *   <id> | <l1> <l2> ...      CTC label sequence
 */
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctc.hpp"
#include "numeric.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "sequence.hpp"

namespace ligru {

enum class ArchiveErrorKind { io, bad_magic, bad_version, truncated, dimension, non_finite };

class ArchiveError : public std::runtime_error {
public:
  ArchiveError(ArchiveErrorKind kind, const std::string &msg,
               std::size_t offset = 0)
      : std::runtime_error(msg), kind_(kind), offset_(offset) {}
  ArchiveErrorKind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

private:
  ArchiveErrorKind kind_;
  std::size_t offset_;
};

struct FeatureSequence {
  std::string id;
  Matrix<float> frames; // T × d
};

struct FeatureArchive {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t dim = 0;
  std::vector<FeatureSequence> sequences;

  void validate() const {
    if (dim == 0)
      throw ArchiveError(ArchiveErrorKind::dimension, "archive: zero feature dimension");
    for (const auto &s : sequences) {
      if (s.frames.cols() != dim)
        throw ArchiveError(ArchiveErrorKind::dimension,
                           "archive: sequence '" + s.id + "' has dimension " +
                               std::to_string(s.frames.cols()) + ", archive has " +
                               std::to_string(dim));
      if (s.frames.rows() == 0)
        throw ArchiveError(ArchiveErrorKind::dimension,
                           "archive: sequence '" + s.id + "' is empty");
      if (s.id.size() > 0xFFFF)
        throw ArchiveError(ArchiveErrorKind::dimension,
                           "archive: utterance id longer than 65535 bytes");
      if (!all_finite(s.frames))
        throw ArchiveError(ArchiveErrorKind::non_finite,
                           "archive: sequence '" + s.id + "' has non-finite values");
    }
  }
};

namespace detail {
inline void put_u16(std::string &out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string &out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

/// Sequential little-endian reader that reports the offset of any short read.
class ByteReader {
public:
  explicit ByteReader(const std::string &bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char *what) {
    if (bytes_.size() - pos_ < n)
      throw ArchiveError(ArchiveErrorKind::truncated,
                         std::string("truncated while reading ") + what +
                             " at byte offset " + std::to_string(pos_),
                         pos_);
  }
  std::uint64_t uint(std::size_t width, const char *what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
           << (8 * i);
    pos_ += width;
    return v;
  }
  std::uint16_t u16(const char *what) { return static_cast<std::uint16_t>(uint(2, what)); }
  std::uint32_t u32(const char *what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char *what) { return uint(8, what); }
  float f32(const char *what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char *what) { return std::bit_cast<double>(u64(what)); }
  std::string str(std::size_t n, const char *what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

private:
  const std::string &bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ArchiveError(ArchiveErrorKind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string &path, const std::string &bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw ArchiveError(ArchiveErrorKind::io, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw ArchiveError(ArchiveErrorKind::io, "short write to " + path);
}
} // namespace detail

inline std::string encode_feature_archive(const FeatureArchive &a) {
  a.validate();
  std::string out = "LGRU";
  detail::put_u32(out, FeatureArchive::kVersion);
  detail::put_u32(out, a.dim);
  detail::put_u32(out, static_cast<std::uint32_t>(a.sequences.size()));
  for (const auto &s : a.sequences) {
    detail::put_u16(out, static_cast<std::uint16_t>(s.id.size()));
    out += s.id;
    detail::put_u32(out, static_cast<std::uint32_t>(s.frames.rows()));
    for (float v : s.frames.values())
      detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline FeatureArchive decode_feature_archive(const std::string &bytes) {
  detail::ByteReader in(bytes);
  if (in.str(4, "magic") != "LGRU")
    throw ArchiveError(ArchiveErrorKind::bad_magic, "archive: bad magic", 0);
  const auto version = in.u32("version");
  if (version != FeatureArchive::kVersion)
    throw ArchiveError(ArchiveErrorKind::bad_version,
                       "archive: unsupported version " + std::to_string(version), 4);
  FeatureArchive a;
  a.dim = in.u32("dimension");
  if (a.dim == 0)
    throw ArchiveError(ArchiveErrorKind::dimension, "archive: zero feature dimension", 8);
  const auto count = in.u32("sequence count");
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureSequence s;
    s.id = in.str(in.u16("id length"), "utterance id");
    const auto frames = in.u32("frame count");
    if (frames == 0)
      throw ArchiveError(ArchiveErrorKind::dimension,
                         "archive: sequence '" + s.id + "' has no frames",
                         in.offset());
    const std::size_t values = std::size_t{frames} * a.dim;
    in.need(values * 4, "frames");
    std::vector<float> data(values);
    for (auto &v : data) {
      const std::size_t at = in.offset();
      v = in.f32("frames");
      if (!std::isfinite(v))
        throw ArchiveError(ArchiveErrorKind::non_finite,
                           "archive: non-finite value in '" + s.id +
                               "' at byte offset " + std::to_string(at),
                           at);
    }
    s.frames = Matrix<float>(frames, a.dim, std::move(data));
    a.sequences.push_back(std::move(s));
  }
  if (!in.done())
    throw ArchiveError(ArchiveErrorKind::dimension,
                       "archive: trailing bytes at offset " + std::to_string(in.offset()) +
                           " (sequence sizes inconsistent with dimension)",
                       in.offset());
  return a;
}

inline void write_feature_archive(const std::string &path, const FeatureArchive &a) {
  detail::write_file(path, encode_feature_archive(a));
}

inline FeatureArchive read_feature_archive(const std::string &path) {
  return decode_feature_archive(detail::read_file(path));
}

struct Target {
  bool ctc = false;
  std::vector<int> labels; // per frame, or the CTC label sequence
};

/// Targets keyed by utterance id, in file order.
struct TargetFile {
  std::vector<std::string> ids;
  std::map<std::string, Target> targets;

  void add(const std::string &id, Target t) {
    if (!targets.emplace(id, std::move(t)).second)
      throw ContractViolation("targets: duplicate id '" + id + "'");
    ids.push_back(id);
  }
  const Target &at(const std::string &id) const {
    auto it = targets.find(id);
    if (it == targets.end())
      throw ContractViolation("targets: no entry for utterance '" + id + "'");
    return it->second;
  }
};

inline void write_targets(const std::string &path, const TargetFile &tf) {
  std::ofstream out(path);
  if (!out)
    throw ArchiveError(ArchiveErrorKind::io, "cannot write " + path);
  for (const auto &id : tf.ids) {
    const Target &t = tf.at(id);
    out << id;
    if (t.ctc)
      out << " |";
    for (int l : t.labels)
      out << ' ' << l;
    out << '\n';
  }
}

inline TargetFile read_targets(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw ArchiveError(ArchiveErrorKind::io, "cannot open " + path);
  TargetFile tf;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string id;
    if (!(ls >> id))
      continue;
    Target t;
    std::string tok;
    bool first = true;
    while (ls >> tok) {
      if (first && tok == "|") {
        t.ctc = true;
        first = false;
        continue;
      }
      first = false;
      std::size_t used = 0;
      long v = -1;
      try {
        v = std::stol(tok, &used);
      } catch (const std::exception &) {
        used = 0;
      }
      if (used != tok.size() || v < 0)
        throw ContractViolation("targets: bad label '" + tok + "' on line " +
                                std::to_string(lineno) + " of " + path);
      t.labels.push_back(static_cast<int>(v));
    }
    tf.add(id, std::move(t));
  }
  return tf;
}

/// In-memory corpus aligned with its targets.
template <class T> struct Dataset {
  std::vector<std::string> ids;
  std::vector<Matrix<T>> features;
  std::vector<Target> targets;
  std::size_t dim = 0;

  std::size_t size() const { return ids.size(); }
  std::vector<std::size_t> lengths() const {
    std::vector<std::size_t> l;
    for (const auto &f : features)
      l.push_back(f.rows());
    return l;
  }
  std::size_t frames() const {
    std::size_t n = 0;
    for (const auto &f : features)
      n += f.rows();
    return n;
  }
  bool is_ctc() const { return !targets.empty() && targets.front().ctc; }

  /// Largest label id + 1 over the targets.
  int label_count() const {
    int k = 0;
    for (const auto &t : targets)
      for (int l : t.labels)
        k = std::max(k, l + 1);
    return k;
  }

  static Dataset assemble(const FeatureArchive &a, const TargetFile &tf) {
    Dataset d;
    d.dim = a.dim;
    bool kind_set = false, ctc = false;
    for (const auto &s : a.sequences) {
      const Target &t = tf.at(s.id);
      if (kind_set && t.ctc != ctc)
        throw ContractViolation("targets: mixed framewise and CTC entries");
      kind_set = true;
      ctc = t.ctc;
      if (!t.ctc && t.labels.size() != s.frames.rows())
        throw ContractViolation("targets: '" + s.id + "' has " +
                                std::to_string(t.labels.size()) +
                                " frame labels for " +
                                std::to_string(s.frames.rows()) + " frames");
      d.ids.push_back(s.id);
      d.features.push_back(matrix_cast<T>(s.frames));
      d.targets.push_back(t);
    }
    return d;
  }
};

/// A padded minibatch with its targets.
template <class T> struct Minibatch {
  SeqBatch<T> x;
  std::vector<int> frame_targets; // time-major, framewise only
  std::vector<LabelSeq> label_targets;
};

template <class T>
Minibatch<T> make_minibatch(const Dataset<T> &d,
                            const std::vector<std::size_t> &indices) {
  std::vector<const Matrix<T> *> seqs;
  for (auto i : indices)
    seqs.push_back(&d.features.at(i));
  Minibatch<T> mb;
  mb.x = SeqBatch<T>::pack(seqs);
  if (d.is_ctc()) {
    for (auto i : indices)
      mb.label_targets.push_back(d.targets[i].labels);
  } else {
    mb.frame_targets.assign(mb.x.steps * mb.x.batch, 0);
    for (std::size_t b = 0; b < indices.size(); ++b)
      for (std::size_t t = 0; t < mb.x.lengths[b]; ++t)
        mb.frame_targets[mb.x.row(t, b)] = d.targets[indices[b]].labels[t];
  }
  return mb;
}

enum class SynthTask { framewise_pattern, delayed_echo, ctc_spelling };

inline SynthTask parse_synth_task(const std::string &s) {
  if (s == "framewise-pattern")
    return SynthTask::framewise_pattern;
  if (s == "delayed-echo")
    return SynthTask::delayed_echo;
  if (s == "ctc-spelling")
    return SynthTask::ctc_spelling;
  throw ContractViolation("unknown synthetic task '" + s + "'");
}

struct SynthParams {
  std::size_t train = 200;
  std::size_t dev = 50;
  std::size_t classes = 10;
  std::size_t dim = 8;
  double noise = 0.5;
  std::size_t min_len = 20;
  std::size_t max_len = 60;
  std::size_t delay = 20;     // delayed-echo
  std::size_t min_segment = 3;
  std::size_t max_segment = 10;
  std::size_t min_labels = 2; // ctc-spelling
  std::size_t max_labels = 5;

  void validate() const {
    if (classes < 1 || dim < 1)
      throw ContractViolation("synth: classes and dim must be >= 1");
    if (min_len < 1 || min_len > max_len)
      throw ContractViolation("synth: need 1 <= min_len <= max_len");
    if (min_segment < 1 || min_segment > max_segment)
      throw ContractViolation("synth: need 1 <= min_segment <= max_segment");
    if (min_labels < 1 || min_labels > max_labels)
      throw ContractViolation("synth: need 1 <= min_labels <= max_labels");
    if (noise < 0.0)
      throw ContractViolation("synth: negative noise");
  }
};

struct SynthSplit {
  FeatureArchive features;
  TargetFile targets;
};

struct SynthCorpus {
  Matrix<float> templates; // classes × dim class means
  SynthSplit train;
  SynthSplit dev;
};

namespace detail {
inline std::size_t draw_between(RngStream &rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline void emit_frame(Matrix<float> &m, std::size_t t, const Matrix<float> &tpl,
                       std::size_t cls, double noise, RngStream &rng) {
  for (std::size_t j = 0; j < m.cols(); ++j)
    m(t, j) = static_cast<float>(tpl(cls, j) + noise * rng.normal());
}

inline void emit_silence(Matrix<float> &m, std::size_t t, double noise,
                         RngStream &rng) {
  for (std::size_t j = 0; j < m.cols(); ++j)
    m(t, j) = static_cast<float>(noise * rng.normal());
}

inline FeatureSequence synth_utterance(SynthTask task, const SynthParams &p,
                                       const Matrix<float> &tpl,
                                       const std::string &id, Target &target,
                                       RngStream &rng) {
  FeatureSequence s;
  s.id = id;
  switch (task) {
  case SynthTask::framewise_pattern: {
    const std::size_t T = draw_between(rng, p.min_len, p.max_len);
    s.frames = Matrix<float>(T, p.dim);
    std::size_t t = 0;
    while (t < T) {
      const std::size_t cls = rng.below(p.classes);
      const std::size_t dur = draw_between(rng, p.min_segment, p.max_segment);
      for (std::size_t k = 0; k < dur && t < T; ++k, ++t) {
        emit_frame(s.frames, t, tpl, cls, p.noise, rng);
        target.labels.push_back(static_cast<int>(cls));
      }
    }
    break;
  }
  case SynthTask::delayed_echo: {
    const std::size_t T = draw_between(rng, p.min_len, p.max_len);
    s.frames = Matrix<float>(T, p.dim);
    std::vector<int> cls(T);
    for (std::size_t t = 0; t < T; ++t) {
      cls[t] = static_cast<int>(rng.below(p.classes));
      emit_frame(s.frames, t, tpl, static_cast<std::size_t>(cls[t]), p.noise, rng);
    }
    for (std::size_t t = 0; t < T; ++t)
      target.labels.push_back(cls[t >= p.delay ? t - p.delay : 0]);
    break;
  }
  case SynthTask::ctc_spelling: {
    target.ctc = true;
    const std::size_t L = draw_between(rng, p.min_labels, p.max_labels);
    std::vector<std::pair<int, std::size_t>> segs; // (label or -1, duration)
    segs.emplace_back(-1, draw_between(rng, 1, 4));
    for (std::size_t i = 0; i < L; ++i) {
      const int l = static_cast<int>(rng.below(p.classes));
      target.labels.push_back(l);
      segs.emplace_back(l, draw_between(rng, p.min_segment, p.max_segment));
      segs.emplace_back(-1, draw_between(rng, 1, 4));
    }
    std::size_t T = 0;
    for (auto &sg : segs)
      T += sg.second;
    s.frames = Matrix<float>(T, p.dim);
    std::size_t t = 0;
    for (auto [l, dur] : segs)
      for (std::size_t k = 0; k < dur; ++k, ++t) {
        if (l < 0)
          emit_silence(s.frames, t, p.noise, rng);
        else
          emit_frame(s.frames, t, tpl, static_cast<std::size_t>(l), p.noise, rng);
      }
    break;
  }
  }
  return s;
}
} // namespace detail

/// Deterministic synthetic corpus. Class templates are unit-variance
/// Gaussian means shared by the train and dev splits.
inline SynthCorpus gen_synthetic(SynthTask task, const SynthParams &p,
                                 std::uint64_t seed) {
  p.validate();
  RngStream rng(seed);
  SynthCorpus c;
  c.templates = Matrix<float>(p.classes, p.dim);
  for (auto &v : c.templates.values())
    v = static_cast<float>(rng.normal());
  const auto split = [&](const char *prefix, std::size_t n, SynthSplit &out) {
    out.features.dim = static_cast<std::uint32_t>(p.dim);
    for (std::size_t i = 0; i < n; ++i) {
      const std::string id = std::string(prefix) + "_" + std::to_string(i);
      Target t;
      out.features.sequences.push_back(
          detail::synth_utterance(task, p, c.templates, id, t, rng));
      out.targets.add(id, std::move(t));
    }
  };
  split("train", p.train, c.train);
  split("dev", p.dev, c.dev);
  return c;
}

} // namespace ligru
