// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ligru/optim.hpp"
#include "ligru/rng.hpp"

using namespace ligru;
using M = Matrix<double>;

namespace {

std::size_t padded_for_order(const std::vector<std::size_t> &order,
                             const std::vector<std::size_t> &lengths,
                             std::size_t batch) {
  std::size_t pad = 0;
  for (std::size_t i = 0; i < order.size(); i += batch) {
    const std::size_t end = std::min(i + batch, order.size());
    std::size_t mx = 0;
    for (std::size_t k = i; k < end; ++k)
      mx = std::max(mx, lengths[order[k]]);
    for (std::size_t k = i; k < end; ++k)
      pad += mx - lengths[order[k]];
  }
  return pad;
}

} // namespace

TEST(Adam, ZeroGradientIsIdentity) {
  M w{{1.5, -2.0}, {0.25, 3.0}};
  const M orig = w;
  M g(2, 2);
  std::vector<ParamSlot<double>> slots{{"w", &w, &g}};
  AdamState<double> st;
  for (int i = 0; i < 50; ++i)
    adam_step(slots, st);
  EXPECT_EQ(w, orig);
  EXPECT_EQ(st.step, 50u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double lr : {1e-3, 0.05}) {
    M w{{0.0}}, g{{1.0}};
    std::vector<ParamSlot<double>> slots{{"w", &w, &g}};
    AdamState<double> st;
    st.lr = lr;
    adam_step(slots, st);
    // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
    EXPECT_NEAR(w[0], -lr / (1.0 + 1e-8), 1e-15);
  }
}

TEST(Adam, MatchesHandRecurrence) {
  M w{{0.3}}, g(1, 1);
  std::vector<ParamSlot<double>> slots{{"w", &w, &g}};
  AdamState<double> st;
  st.lr = 0.01;
  double m = 0, v = 0, x = 0.3;
  const double grads[] = {0.5, -1.0, 2.0, 0.1};
  for (int t = 1; t <= 4; ++t) {
    const double gt = grads[t - 1];
    g[0] = gt;
    adam_step(slots, st);
    m = 0.9 * m + 0.1 * gt;
    v = 0.999 * v + 0.001 * gt * gt;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) /
         (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(w[0], x, 1e-15);
  }
}

TEST(Adam, DefaultsAndDeterminism) {
  AdamState<double> st;
  EXPECT_EQ(st.beta1, 0.9);
  EXPECT_EQ(st.beta2, 0.999);
  EXPECT_EQ(st.eps, 1e-8);

  RngStream rng(1);
  M g(3, 3);
  for (auto &v : g.values())
    v = rng.normal();
  M a(3, 3, 1.0), b(3, 3, 1.0);
  std::vector<ParamSlot<double>> sa{{"a", &a, &g}}, sb{{"b", &b, &g}};
  AdamState<double> s1, s2;
  for (int i = 0; i < 2; ++i) {
    adam_step(sa, s1);
    adam_step(sb, s2);
  }
  EXPECT_EQ(a, b);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  M w{{1.0, 2.0}}, ok{{0.1, 0.2}}, bad{{0.0, NAN}};
  M w2{{3.0}}, g2{{1.0}};
  std::vector<ParamSlot<double>> slots{{"l0.fwd.U_h", &w, &bad}, {"x", &w2, &g2}};
  AdamState<double> st;
  try {
    adam_step(slots, st);
    FAIL();
  } catch (const ComputeError &e) {
    EXPECT_NE(std::string(e.what()).find("l0.fwd.U_h"), std::string::npos);
  }
  EXPECT_EQ(w2[0], 3.0);
  EXPECT_EQ(st.step, 0u);

  std::vector<ParamSlot<double>> mismatch{{"w", &w, &g2}};
  EXPECT_THROW(adam_step(mismatch, st), ContractViolation);
}

TEST(Schedule, ThresholdRule) {
  LrSchedule s;
  s.lr = 0.1;
  EXPECT_EQ(s.update(20.0), 0.1); // first epoch only sets the baseline
  EXPECT_EQ(s.update(19.0), 0.1);
  EXPECT_EQ(s.update(18.9995), 0.05);
  EXPECT_EQ(s.update(19.5), 0.025); // getting worse also halves
  EXPECT_EQ(s.halvings, 2u);
}

TEST(Schedule, LearningRateFollowsHalvingCount) {
  RngStream rng(2);
  LrSchedule s;
  s.lr = 0.008;
  double prev_lr = s.lr;
  double metric = 0.5;
  for (int e = 0; e < 30; ++e) {
    metric -= rng.uniform() < 0.5 ? 0.01 : 0.0002;
    double lr = s.update(metric);
    EXPECT_LE(lr, prev_lr);
    prev_lr = lr;
  }
  EXPECT_EQ(s.lr, 0.008 * std::pow(2.0, -static_cast<double>(s.halvings)));
}

TEST(BatchPlanTest, SortedChunks) {
  auto plan = build_batch_plan({5, 3, 9}, 2);
  EXPECT_EQ(plan.batches, (std::vector<std::vector<std::size_t>>{{1, 0}, {2}}));
}

TEST(BatchPlanTest, SortedInputUnchangedAndTiesStable) {
  auto plan = build_batch_plan({1, 2, 2, 4, 7}, 2);
  EXPECT_EQ(plan.batches,
            (std::vector<std::vector<std::size_t>>{{0, 1}, {2, 3}, {4}}));
  auto ties = build_batch_plan({3, 3, 1, 3}, 8);
  EXPECT_EQ(ties.batches.front(), (std::vector<std::size_t>{2, 0, 1, 3}));
}

TEST(BatchPlanTest, CoversEverySequenceOnceAndLengthsNondecreasing) {
  RngStream rng(3);
  std::vector<std::size_t> lengths(37);
  for (auto &l : lengths)
    l = 1 + rng.below(50);
  auto plan = build_batch_plan(lengths, 8);
  std::vector<int> seen(lengths.size());
  std::size_t prev = 0;
  for (const auto &b : plan.batches) {
    EXPECT_LE(b.size(), 8u);
    for (auto i : b) {
      ++seen[i];
      EXPECT_GE(lengths[i], prev);
      prev = lengths[i];
    }
  }
  for (int c : seen)
    EXPECT_EQ(c, 1);
}

TEST(BatchPlanTest, FullBatchesHaveMinimalPadding) {
  RngStream rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(5);
    std::vector<std::size_t> lengths(n);
    for (auto &l : lengths)
      l = 1 + rng.below(20);
    for (std::size_t batch = 1; batch <= n; ++batch) {
      if (n % batch != 0)
        continue; // a short last batch can be beaten, see below
      auto plan = build_batch_plan(lengths, batch);
      const std::size_t ours = plan.padded_frames(lengths);
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      do {
        ASSERT_LE(ours, padded_for_order(order, lengths, batch));
      } while (std::next_permutation(order.begin(), order.end()));
    }
  }
}

TEST(BatchPlanTest, ShortLastBatchIsNotAlwaysOptimal) {
  const std::vector<std::size_t> lengths{1, 10, 10};
  EXPECT_EQ(build_batch_plan(lengths, 2).padded_frames(lengths), 9u);
  EXPECT_EQ(padded_for_order({1, 2, 0}, lengths, 2), 0u);
}

TEST(BatchPlanTest, InvalidArguments) {
  EXPECT_THROW(build_batch_plan({}, 2), ContractViolation);
  EXPECT_THROW(build_batch_plan({3}, 0), ContractViolation);
}
