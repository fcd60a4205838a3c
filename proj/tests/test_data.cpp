// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "ligru/data.hpp"

using namespace ligru;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string &name) {
  auto p = fs::temp_directory_path() / ("ligru_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

FeatureArchive random_archive(RngStream &rng) {
  FeatureArchive a;
  a.dim = static_cast<std::uint32_t>(1 + rng.below(6));
  const std::size_t count = rng.below(5);
  for (std::size_t s = 0; s < count; ++s) {
    FeatureSequence seq;
    for (std::size_t k = 0, n = rng.below(10); k < n; ++k)
      seq.id += static_cast<char>('a' + rng.below(26));
    seq.frames = Matrix<float>(1 + rng.below(8), a.dim);
    for (auto &v : seq.frames.values())
      v = static_cast<float>(rng.normal(0.0, std::pow(10.0, rng.uniform(-20, 20))));
    a.sequences.push_back(std::move(seq));
  }
  return a;
}

bool bit_equal(const FeatureArchive &a, const FeatureArchive &b) {
  if (a.dim != b.dim || a.sequences.size() != b.sequences.size())
    return false;
  for (std::size_t i = 0; i < a.sequences.size(); ++i) {
    const auto &x = a.sequences[i], &y = b.sequences[i];
    if (x.id != y.id || !x.frames.same_shape(y.frames))
      return false;
    for (std::size_t k = 0; k < x.frames.size(); ++k)
      if (std::bit_cast<std::uint32_t>(x.frames[k]) !=
          std::bit_cast<std::uint32_t>(y.frames[k]))
        return false;
  }
  return true;
}

ArchiveErrorKind decode_error(const std::string &bytes, std::size_t *offset = nullptr) {
  try {
    decode_feature_archive(bytes);
  } catch (const ArchiveError &e) {
    if (offset)
      *offset = e.offset();
    return e.kind();
  }
  ADD_FAILURE() << "archive decoded without error";
  return ArchiveErrorKind::io;
}

// Frame accuracy on dev of a memoryless softmax classifier trained by full
// batch gradient descent on the training frames.
double softmax_frame_accuracy(const SynthCorpus &c, std::size_t classes) {
  const auto train = Dataset<double>::assemble(c.train.features, c.train.targets);
  const auto dev = Dataset<double>::assemble(c.dev.features, c.dev.targets);
  const std::size_t d = train.dim;
  Matrix<double> W(d + 1, classes);
  std::vector<double> logits(classes);
  const auto scores = [&](const Matrix<double> &f, std::size_t t) {
    for (std::size_t k = 0; k < classes; ++k) {
      double s = W(d, k);
      for (std::size_t j = 0; j < d; ++j)
        s += f(t, j) * W(j, k);
      logits[k] = s;
    }
  };
  for (int it = 0; it < 150; ++it) {
    Matrix<double> G(d + 1, classes);
    double n = 0;
    for (std::size_t u = 0; u < train.size(); ++u) {
      const auto &f = train.features[u];
      for (std::size_t t = 0; t < f.rows(); ++t, ++n) {
        scores(f, t);
        const double m = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (auto &v : logits)
          z += (v = std::exp(v - m));
        for (std::size_t k = 0; k < classes; ++k) {
          const double g = logits[k] / z -
                           (static_cast<int>(k) == train.targets[u].labels[t] ? 1.0 : 0.0);
          for (std::size_t j = 0; j < d; ++j)
            G(j, k) += g * f(t, j);
          G(d, k) += g;
        }
      }
    }
    G *= 2.0 / n;
    W -= G;
  }
  double correct = 0, total = 0;
  for (std::size_t u = 0; u < dev.size(); ++u) {
    const auto &f = dev.features[u];
    for (std::size_t t = 0; t < f.rows(); ++t, ++total) {
      scores(f, t);
      const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
      correct += best == dev.targets[u].labels[t];
    }
  }
  return correct / total;
}

} // namespace

TEST(Archive, RandomRoundTripsAreBitExact) {
  RngStream rng(1);
  for (int i = 0; i < 300; ++i) {
    auto a = random_archive(rng);
    ASSERT_TRUE(bit_equal(a, decode_feature_archive(encode_feature_archive(a))));
  }
}

TEST(Archive, FileRoundTripAndLayout) {
  auto dir = scratch("layout");
  FeatureArchive a;
  a.dim = 2;
  a.sequences.push_back({"u1", Matrix<float>{{1.0f, -2.0f}}});
  const auto path = (dir / "a.lgru").string();
  write_feature_archive(path, a);
  const std::string bytes = detail::read_file(path);
  // magic, version, dim, count, id length, id, frames, 2 floats
  EXPECT_EQ(bytes.size(), 4u + 4 + 4 + 4 + 2 + 2 + 4 + 8);
  EXPECT_EQ(bytes.substr(0, 4), "LGRU");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes.substr(18, 2), "u1");
  EXPECT_TRUE(bit_equal(a, read_feature_archive(path)));
  EXPECT_THROW(read_feature_archive((dir / "missing").string()), ArchiveError);
  fs::remove_all(dir);
}

TEST(Archive, TruncationNamesOffset) {
  FeatureArchive a;
  a.dim = 3;
  a.sequences.push_back({"x", Matrix<float>(4, 3, 0.5f)});
  const std::string bytes = encode_feature_archive(a);
  for (std::size_t cut : {2u, 10u, 17u, 30u}) {
    std::size_t offset = 0;
    EXPECT_EQ(decode_error(bytes.substr(0, cut), &offset), ArchiveErrorKind::truncated);
    EXPECT_LE(offset, cut);
  }
  try {
    decode_feature_archive(bytes.substr(0, bytes.size() - 1));
  } catch (const ArchiveError &e) {
    EXPECT_NE(std::string(e.what()).find("offset 23"), std::string::npos) << e.what();
  }
}

TEST(Archive, DistinctErrorKinds) {
  FeatureArchive a;
  a.dim = 2;
  a.sequences.push_back({"x", Matrix<float>(2, 2, 1.0f)});
  std::string bytes = encode_feature_archive(a);

  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(decode_error(magic), ArchiveErrorKind::bad_magic);

  std::string version = bytes;
  version[4] = 2;
  EXPECT_EQ(decode_error(version), ArchiveErrorKind::bad_version);

  std::string nan = bytes;
  const auto qnan = std::bit_cast<std::uint32_t>(std::numeric_limits<float>::quiet_NaN());
  for (int i = 0; i < 4; ++i)
    nan[nan.size() - 4 + i] = static_cast<char>((qnan >> (8 * i)) & 0xFF);
  EXPECT_EQ(decode_error(nan), ArchiveErrorKind::non_finite);

  // header says d = 2 but a sequence carries one extra value
  std::string extra = bytes + std::string(4, '\0');
  EXPECT_EQ(decode_error(extra), ArchiveErrorKind::dimension);
}

TEST(Archive, MixedDimensionsRejected) {
  FeatureArchive a;
  a.dim = 2;
  a.sequences.push_back({"x", Matrix<float>(2, 2)});
  a.sequences.push_back({"y", Matrix<float>(2, 3)});
  try {
    encode_feature_archive(a);
    FAIL();
  } catch (const ArchiveError &e) {
    EXPECT_EQ(e.kind(), ArchiveErrorKind::dimension);
  }
  a.sequences.pop_back();
  a.sequences[0].frames(1, 1) = std::numeric_limits<float>::infinity();
  try {
    encode_feature_archive(a);
    FAIL();
  } catch (const ArchiveError &e) {
    EXPECT_EQ(e.kind(), ArchiveErrorKind::non_finite);
  }
}

TEST(Targets, RoundTripBothKinds) {
  auto dir = scratch("targets");
  TargetFile tf;
  tf.add("a", {false, {0, 0, 3}});
  tf.add("b", {true, {2, 1}});
  tf.add("c", {true, {}});
  const auto path = (dir / "t.tgt").string();
  write_targets(path, tf);
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text, "a 0 0 3\nb | 2 1\nc |\n");
  auto back = read_targets(path);
  EXPECT_EQ(back.ids, tf.ids);
  EXPECT_TRUE(back.at("b").ctc);
  EXPECT_EQ(back.at("a").labels, (std::vector<int>{0, 0, 3}));
  EXPECT_THROW(tf.add("a", {}), ContractViolation);
  EXPECT_THROW(tf.at("zzz"), ContractViolation);

  std::ofstream(path) << "a 1 x\n";
  EXPECT_THROW(read_targets(path), ContractViolation);
  std::ofstream(path) << "a 1 -2\n";
  EXPECT_THROW(read_targets(path), ContractViolation);
  fs::remove_all(dir);
}

TEST(DatasetTest, AssembleChecksTargets) {
  FeatureArchive a;
  a.dim = 1;
  a.sequences.push_back({"u", Matrix<float>(3, 1)});
  a.sequences.push_back({"v", Matrix<float>(2, 1)});
  TargetFile good;
  good.add("u", {false, {0, 1, 2}});
  good.add("v", {false, {4, 4}});
  auto d = Dataset<double>::assemble(a, good);
  EXPECT_EQ(d.label_count(), 5);
  EXPECT_EQ(d.frames(), 5u);
  EXPECT_FALSE(d.is_ctc());

  TargetFile short_t;
  short_t.add("u", {false, {0, 1}});
  short_t.add("v", {false, {4, 4}});
  EXPECT_THROW(Dataset<double>::assemble(a, short_t), ContractViolation);

  TargetFile mixed;
  mixed.add("u", {false, {0, 1, 2}});
  mixed.add("v", {true, {1}});
  EXPECT_THROW(Dataset<double>::assemble(a, mixed), ContractViolation);

  TargetFile missing;
  missing.add("u", {false, {0, 1, 2}});
  EXPECT_THROW(Dataset<double>::assemble(a, missing), ContractViolation);

  auto mb = make_minibatch(d, {1, 0});
  EXPECT_EQ(mb.x.steps, 3u);
  EXPECT_EQ(mb.frame_targets, (std::vector<int>{4, 0, 4, 1, 0, 2}));
}

TEST(Synthetic, SameSeedSameCorpus) {
  SynthParams p;
  p.train = 10;
  p.dev = 4;
  for (auto task : {SynthTask::framewise_pattern, SynthTask::delayed_echo,
                    SynthTask::ctc_spelling}) {
    auto a = gen_synthetic(task, p, 7), b = gen_synthetic(task, p, 7);
    EXPECT_EQ(encode_feature_archive(a.train.features), encode_feature_archive(b.train.features));
    EXPECT_EQ(encode_feature_archive(a.dev.features), encode_feature_archive(b.dev.features));
    auto c = gen_synthetic(task, p, 8);
    EXPECT_NE(encode_feature_archive(a.train.features), encode_feature_archive(c.train.features));
  }
}

TEST(Synthetic, ShapesAndTargetKinds) {
  SynthParams p;
  p.train = 20;
  p.dev = 5;
  auto fw = gen_synthetic(SynthTask::framewise_pattern, p, 1);
  EXPECT_EQ(fw.train.features.sequences.size(), 20u);
  for (const auto &s : fw.train.features.sequences) {
    EXPECT_GE(s.frames.rows(), p.min_len);
    EXPECT_LE(s.frames.rows(), p.max_len);
    EXPECT_EQ(fw.train.targets.at(s.id).labels.size(), s.frames.rows());
  }
  auto ctc = gen_synthetic(SynthTask::ctc_spelling, p, 1);
  for (const auto &s : ctc.train.features.sequences) {
    const auto &t = ctc.train.targets.at(s.id);
    EXPECT_TRUE(t.ctc);
    EXPECT_GE(t.labels.size(), p.min_labels);
    EXPECT_LE(t.labels.size(), p.max_labels);
    EXPECT_GE(s.frames.rows(), ctc_min_frames(t.labels));
  }
  auto echo = gen_synthetic(SynthTask::delayed_echo, p, 1);
  // targets before the delay repeat the first frame's class
  const auto &t0 = echo.train.targets.at("train_0").labels;
  for (std::size_t t = 1; t < p.delay && t < t0.size(); ++t)
    EXPECT_EQ(t0[t], t0[0]);

  SynthParams bad;
  bad.min_len = 10;
  bad.max_len = 5;
  EXPECT_THROW(gen_synthetic(SynthTask::framewise_pattern, bad, 1), ContractViolation);
  EXPECT_THROW(parse_synth_task("speech"), ContractViolation);
}

TEST(Synthetic, NoiselessPatternIsNearestTemplateSeparable) {
  SynthParams p;
  p.noise = 0.0;
  p.train = 10;
  p.dev = 10;
  auto c = gen_synthetic(SynthTask::framewise_pattern, p, 3);
  std::size_t total = 0, correct = 0;
  for (const auto &s : c.dev.features.sequences) {
    const auto &labels = c.dev.targets.at(s.id).labels;
    for (std::size_t t = 0; t < s.frames.rows(); ++t, ++total) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < p.classes; ++k) {
        double dist = 0;
        for (std::size_t j = 0; j < p.dim; ++j) {
          const double diff = s.frames(t, j) - c.templates(k, j);
          dist += diff * diff;
        }
        if (dist < best_d) {
          best_d = dist;
          best = k;
        }
      }
      correct += static_cast<int>(best) == labels[t];
    }
  }
  EXPECT_EQ(correct, total);
}

TEST(Synthetic, DelayedEchoDefeatsMemorylessClassifier) {
  SynthParams p;
  p.train = 60;
  p.dev = 30;
  p.delay = 0;
  const double now = softmax_frame_accuracy(gen_synthetic(SynthTask::delayed_echo, p, 4),
                                            p.classes);
  p.delay = 20;
  const double later = softmax_frame_accuracy(gen_synthetic(SynthTask::delayed_echo, p, 4),
                                              p.classes);
  EXPECT_GT(now, 0.9);
  // chance is 1/classes; frames before the delay add a little
  EXPECT_LT(later, 0.2);
}
