// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "ligru/cells.hpp"
#include "ligru/gradcheck.hpp"

using namespace ligru;
using M = Matrix<double>;

namespace {

using Vec = std::vector<double>;

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Σ_i x_i W(i, j), computed neuron by neuron.
double dot_col(const Vec &x, const M &w, std::size_t j) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    s += x[i] * w(i, j);
  return s;
}

// Feed-forward term of gate g for unit j, eval-mode batch norm included.
double ff_term(const CellParams<double> &p, std::size_t g, const Vec &x,
               std::size_t j) {
  double a = dot_col(x, p.W[g], j);
  if (p.batch_norm) {
    const auto &bn = p.bn[g];
    a = bn.gamma[j] * (a - bn.running_mean[j]) /
            std::sqrt(bn.running_var[j] + bn.eps) +
        bn.beta[j];
  }
  if (p.has_bias())
    a += p.b[g][j];
  return a;
}

struct ScalarState {
  Vec h, c;
};

// Independent per-neuron re-implementation of one step for a single frame.
ScalarState scalar_step(const CellParams<double> &p, const Vec &x,
                        const ScalarState &s) {
  const std::size_t n = p.units;
  ScalarState out{Vec(n), Vec(n)};
  switch (p.kind) {
  case CellKind::vanilla_relu:
    for (std::size_t j = 0; j < n; ++j)
      out.h[j] = std::max(0.0, ff_term(p, 0, x, j) + dot_col(s.h, p.U[0], j));
    break;
  case CellKind::gru: {
    Vec z(n), r(n), hr(n);
    for (std::size_t j = 0; j < n; ++j) {
      z[j] = sig(ff_term(p, 0, x, j) + dot_col(s.h, p.U[0], j));
      r[j] = sig(ff_term(p, 1, x, j) + dot_col(s.h, p.U[1], j));
      hr[j] = s.h[j] * r[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      double cand = std::tanh(ff_term(p, 2, x, j) + dot_col(hr, p.U[2], j));
      out.h[j] = z[j] * s.h[j] + (1 - z[j]) * cand;
    }
    break;
  }
  case CellKind::mgru:
  case CellKind::ligru:
    for (std::size_t j = 0; j < n; ++j) {
      double z = sig(ff_term(p, 0, x, j) + dot_col(s.h, p.U[0], j));
      double a = ff_term(p, 1, x, j) + dot_col(s.h, p.U[1], j);
      double cand = p.kind == CellKind::mgru ? std::tanh(a) : std::max(0.0, a);
      out.h[j] = z * s.h[j] + (1 - z) * cand;
    }
    break;
  case CellKind::lstm:
    for (std::size_t j = 0; j < n; ++j) {
      double i = sig(ff_term(p, 0, x, j) + dot_col(s.h, p.U[0], j));
      double f = sig(ff_term(p, 1, x, j) + dot_col(s.h, p.U[1], j));
      double o = sig(ff_term(p, 2, x, j) + dot_col(s.h, p.U[2], j));
      double g = std::tanh(ff_term(p, 3, x, j) + dot_col(s.h, p.U[3], j));
      out.c[j] = f * s.c[j] + i * g;
      out.h[j] = o * std::tanh(out.c[j]);
    }
    break;
  }
  return out;
}

CellParams<double> seeded_params(CellKind kind, std::size_t d, std::size_t n,
                                 bool bn, std::uint64_t seed) {
  RngStream rng(seed);
  auto p = init_cell<double>(kind, d, n, bn, rng);
  for (auto &b : p.b)
    for (auto &v : b.values())
      v = rng.uniform(-0.5, 0.5);
  for (auto &st : p.bn) {
    for (auto &v : st.gamma.values())
      v = rng.uniform(0.5, 1.5);
    for (auto &v : st.beta.values())
      v = rng.uniform(-0.5, 0.5);
    for (auto &v : st.running_mean.values())
      v = rng.uniform(-0.3, 0.3);
    for (auto &v : st.running_var.values())
      v = rng.uniform(0.5, 2.0);
  }
  return p;
}

M row_matrix(const Vec &v) { return M(1, v.size(), v); }

} // namespace

class CellOracle : public ::testing::TestWithParam<CellKind> {};

TEST_P(CellOracle, MatchesScalarReimplementation) {
  const CellKind kind = GetParam();
  for (bool bn : {false, true}) {
    auto p = seeded_params(kind, 2, 3, bn, 17);
    RngStream rng(18);
    ScalarState ref{Vec(3), Vec(3)};
    M h(1, 3), c(1, 3);
    for (int t = 0; t < 5; ++t) {
      Vec x{rng.normal(), rng.normal()};
      ref = scalar_step(p, x, ref);
      auto out = cell_step(p, row_matrix(x), h, Mode::eval, &c);
      for (std::size_t j = 0; j < 3; ++j)
        ASSERT_NEAR(out.h[j], ref.h[j], 1e-12) << to_string(kind) << " t=" << t;
      h = out.h;
      if (kind == CellKind::lstm)
        c = out.c;
    }
  }
}

TEST_P(CellOracle, ZeroUpstreamGivesZeroGradients) {
  const CellKind kind = GetParam();
  RngStream rng(5);
  auto inst = random_cell_instance(kind, kind == CellKind::ligru, false, rng);
  auto tr = sequence_forward(inst.params, inst.x, Mode::train);
  auto g = sequence_backward(inst.params, tr, M(tr.h.rows(), tr.h.cols()));
  for_each_param(g.params, [](const std::string &name, const M &m) {
    for (double v : m.values())
      EXPECT_EQ(v, 0.0) << name;
  });
  for (double v : g.d_input.values())
    EXPECT_EQ(v, 0.0);
}

TEST_P(CellOracle, GradientsMatchFiniteDifferences) {
  const CellKind kind = GetParam();
  RngStream rng(100 + static_cast<int>(kind));
  for (bool bn : {false, true})
    for (bool dropout : {false, true}) {
      auto rep = check_random_cell(kind, bn, dropout, rng);
      EXPECT_LT(rep.max_rel(), 1e-4) << rep.label << " worst "
                                     << rep.worst()->name;
    }
}

TEST_P(CellOracle, PaddingDoesNotChangeValidFrames) {
  const CellKind kind = GetParam();
  auto p = seeded_params(kind, 3, 4, false, 9);
  RngStream rng(10);
  M seq(4, 3);
  for (auto &v : seq.values())
    v = rng.normal();
  M longer(7, 3);
  for (auto &v : longer.values())
    v = rng.normal();

  auto alone = SeqBatch<double>::pack(std::vector<M>{seq});
  auto mixed = SeqBatch<double>::pack(std::vector<M>{seq, longer});
  auto a = sequence_forward(p, alone, Mode::eval);
  auto b = sequence_forward(p, mixed, Mode::eval);
  EXPECT_EQ(alone.unpack(a.h, 0), mixed.unpack(b.h, 0));
  for (std::size_t t = 4; t < 7; ++t)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_EQ(b.h(mixed.row(t, 0), j), 0.0);
}

TEST_P(CellOracle, SingleStepSequenceEqualsStep) {
  const CellKind kind = GetParam();
  auto p = seeded_params(kind, 2, 3, false, 21);
  M x{{0.3, -0.8}, {1.1, 0.4}};
  auto sb = SeqBatch<double>::pack(std::vector<M>{M{{0.3, -0.8}}, M{{1.1, 0.4}}});
  auto tr = sequence_forward(p, sb, Mode::eval);
  auto out = cell_step(p, x, M(2, 3));
  EXPECT_EQ(tr.h, out.h);
}

TEST_P(CellOracle, BatchPermutationEquivariantInTrainMode) {
  const CellKind kind = GetParam();
  auto p = seeded_params(kind, 3, 4, true, 31);
  RngStream rng(32);
  std::vector<M> seqs;
  for (std::size_t len : {5u, 2u, 7u, 4u}) {
    M s(len, 3);
    for (auto &v : s.values())
      v = rng.normal();
    seqs.push_back(s);
  }
  std::vector<M> perm{seqs[2], seqs[0], seqs[3], seqs[1]};
  const std::size_t where[4] = {1, 3, 0, 2};
  auto p2 = p;
  auto a = SeqBatch<double>::pack(seqs);
  auto b = SeqBatch<double>::pack(perm);
  auto ta = sequence_forward(p, a, Mode::train);
  auto tb = sequence_forward(p2, b, Mode::train);
  for (std::size_t i = 0; i < 4; ++i) {
    auto ha = a.unpack(ta.h, i), hb = b.unpack(tb.h, where[i]);
    for (std::size_t k = 0; k < ha.size(); ++k)
      EXPECT_NEAR(ha[k], hb[k], 1e-12);
  }
}

TEST_P(CellOracle, GatesStayInOpenUnitInterval) {
  const CellKind kind = GetParam();
  RngStream rng(40);
  InitOptions opt;
  opt.weight_scale = 4.0;
  auto p = init_cell<double>(kind, 3, 5, false, rng, opt);
  M s(30, 3);
  for (auto &v : s.values())
    v = 10 * rng.normal();
  auto sb = SeqBatch<double>::pack(std::vector<M>{s});
  auto tr = sequence_forward(p, sb, Mode::eval);
  const std::size_t sig_gates = kind == CellKind::lstm ? 3 : gate_count(kind) - 1;
  for (std::size_t g = 0; g < sig_gates; ++g)
    for (double v : tr.gates[g].values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
}

INSTANTIATE_TEST_SUITE_P(AllKinds, CellOracle, ::testing::ValuesIn(kAllCellKinds),
                         [](const auto &info) {
                           std::string s(to_string(info.param));
                           std::replace(s.begin(), s.end(), '-', '_');
                           return s;
                         });

TEST(GruStep, ZeroParametersGiveZeroState) {
  auto p = CellParams<double>::zeros(CellKind::gru, 2, 3, false);
  auto out = gru_step(p, M{{4.0, -1.0}}, M(1, 3));
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(out.gates[0][j], 0.5);
    EXPECT_EQ(out.gates[1][j], 0.5);
    EXPECT_EQ(out.gates[2][j], 0.0);
    EXPECT_EQ(out.h[j], 0.0);
  }
}

TEST(GruStep, SaturatedUpdateGateKeepsState) {
  auto p = CellParams<double>::zeros(CellKind::gru, 2, 3, false);
  p.b[0].fill(40.0);
  RngStream rng(1);
  for (auto &w : p.W)
    for (auto &v : w.values())
      v = rng.normal();
  M v{{0.7, -0.2, 0.4}};
  auto out = gru_step(p, M{{1.0, 2.0}}, v);
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_NEAR(out.h[j], v[j], 1e-8);
}

TEST(GruStep, WrongKindRejected) {
  auto p = CellParams<double>::zeros(CellKind::mgru, 2, 3, false);
  EXPECT_THROW(gru_step(p, M(1, 2), M(1, 3)), ContractViolation);
  auto g = CellParams<double>::zeros(CellKind::gru, 2, 3, false);
  EXPECT_THROW(gru_step(g, M(1, 3), M(1, 3)), ContractViolation);
  EXPECT_THROW(gru_step(g, M(1, 2), M(1, 4)), ContractViolation);
}

TEST(MgruStep, ZeroParametersHalveState) {
  auto p = CellParams<double>::zeros(CellKind::mgru, 2, 3, false);
  M v{{0.6, -1.0, 2.0}};
  auto out = mgru_step(p, M{{3.0, 3.0}}, v);
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_EQ(out.h[j], 0.5 * v[j]);
}

TEST(MgruStep, MatchesGruWithOpenReset) {
  auto m = seeded_params(CellKind::mgru, 3, 4, false, 50);
  auto g = CellParams<double>::zeros(CellKind::gru, 3, 4, false);
  g.W = {m.W[0], M(3, 4), m.W[1]};
  g.U = {m.U[0], M(4, 4), m.U[1]};
  g.b = {m.b[0], M(1, 4, 40.0), m.b[1]};
  RngStream rng(51);
  M s(9, 3);
  for (auto &v : s.values())
    v = rng.normal();
  auto sb = SeqBatch<double>::pack(std::vector<M>{s});
  auto tm = sequence_forward(m, sb, Mode::eval);
  auto tg = sequence_forward(g, sb, Mode::eval);
  for (std::size_t i = 0; i < tm.h.size(); ++i)
    EXPECT_NEAR(tm.h[i], tg.h[i], 1e-9);
}

TEST(LigruStep, ZeroWeightsThroughBatchNorm) {
  auto p = CellParams<double>::zeros(CellKind::ligru, 2, 3, true);
  EXPECT_FALSE(p.has_bias());
  M x{{1.0, 2.0}, {-3.0, 0.5}};
  M v{{0.4, -0.6, 1.0}, {2.0, 0.0, -1.0}};
  auto out = ligru_step(p, x, v, Mode::train);
  for (std::size_t i = 0; i < v.size(); ++i)
    EXPECT_DOUBLE_EQ(out.h[i], 0.5 * v[i]);
}

TEST(LigruStep, EvalIterationClosedForm) {
  auto p = CellParams<double>::zeros(CellKind::ligru, 2, 3, true, 1.0);
  p.U[1] = M::identity(3);
  M h{{0.8, -0.4, 0.0}};
  for (int t = 0; t < 6; ++t) {
    M expect(1, 3);
    for (std::size_t j = 0; j < 3; ++j)
      expect[j] = 0.5 * h[j] + 0.5 * std::max(0.0, h[j]);
    h = ligru_step(p, M(1, 2), h, Mode::eval).h;
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_DOUBLE_EQ(h[j], expect[j]);
  }
  EXPECT_GT(h[0], 0.0);
  EXPECT_LT(h[1], 0.0); // a negative start decays by halves, never flips sign
}

TEST(LigruStep, TrainModeNeedsTwoFrames) {
  auto p = CellParams<double>::zeros(CellKind::ligru, 2, 3, true);
  EXPECT_THROW(ligru_step(p, M(1, 2), M(1, 3), Mode::train), ContractViolation);
}

TEST(LigruStep, StatesNonnegativeFromZero) {
  RngStream rng(60);
  InitOptions opt;
  opt.gamma = 1.0;
  auto p = init_cell<double>(CellKind::ligru, 4, 6, true, rng, opt);
  std::vector<M> seqs;
  for (std::size_t len : {12u, 8u, 15u}) {
    M s(len, 4);
    for (auto &v : s.values())
      v = 3 * rng.normal();
    seqs.push_back(s);
  }
  auto sb = SeqBatch<double>::pack(seqs);
  auto tr = sequence_forward(p, sb, Mode::train);
  for (double v : tr.h.values())
    EXPECT_GE(v, 0.0);
}

TEST(LstmStep, ZeroParametersZeroState) {
  auto p = CellParams<double>::zeros(CellKind::lstm, 2, 3, false);
  auto out = lstm_step(p, M{{1.0, -1.0}}, M(1, 3), M(1, 3));
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(out.h[j], 0.0);
    EXPECT_EQ(out.c[j], 0.0);
  }
}

TEST(LstmStep, SaturatedGatesKeepCell) {
  auto p = CellParams<double>::zeros(CellKind::lstm, 2, 3, false);
  p.b[0].fill(-20.0);
  p.b[1].fill(20.0);
  RngStream rng(3);
  for (auto &v : p.W[3].values())
    v = rng.normal();
  M c{{0.9, -0.3, 1.7}};
  auto out = lstm_step(p, M{{0.5, 0.5}}, M(1, 3), c);
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_NEAR(out.c[j], c[j], 1e-8);
}

TEST(LstmInit, ForgetBiasIsOne) {
  RngStream rng(1);
  auto p = init_cell<double>(CellKind::lstm, 2, 3, false, rng);
  for (double v : p.b[1].values())
    EXPECT_EQ(v, 1.0);
  for (double v : p.b[0].values())
    EXPECT_EQ(v, 0.0);
}

TEST(CellParamsLayout, GateNamesAndParsing) {
  EXPECT_EQ(gate_count(CellKind::gru), 3u);
  EXPECT_EQ(gate_count(CellKind::mgru), 2u);
  EXPECT_EQ(gate_count(CellKind::ligru), 2u);
  EXPECT_EQ(gate_count(CellKind::lstm), 4u);
  EXPECT_EQ(gate_count(CellKind::vanilla_relu), 1u);
  for (auto k : kAllCellKinds)
    EXPECT_EQ(parse_cell_kind(to_string(k)), k);
  EXPECT_THROW(parse_cell_kind("transformer"), ContractViolation);
  EXPECT_TRUE(cell_uses_bias(CellKind::gru, true));
  EXPECT_FALSE(cell_uses_bias(CellKind::ligru, true));
  EXPECT_TRUE(cell_uses_bias(CellKind::ligru, false));
  EXPECT_THROW(CellParams<double>::zeros(CellKind::gru, 0, 3, false),
               ContractViolation);
}

TEST(CellParamsLayout, ParamNamesInOrder) {
  auto p = CellParams<double>::zeros(CellKind::ligru, 2, 3, true);
  std::vector<std::string> names;
  for_each_param(p, [&](const std::string &n, const M &) { names.push_back(n); });
  EXPECT_EQ(names, (std::vector<std::string>{"W_z", "W_h", "U_z", "U_h", "gamma_z",
                                             "beta_z", "gamma_h", "beta_h"}));
}

TEST(DropoutInCell, ZeroMaskRemovesRecurrence) {
  for (auto kind : kAllCellKinds) {
    auto p = seeded_params(kind, 2, 3, false, 70);
    auto cut = p;
    for (auto &u : cut.U)
      u.fill(0.0);
    RngStream rng(71);
    M s(6, 2);
    for (auto &v : s.values())
      v = rng.normal();
    auto sb = SeqBatch<double>::pack(std::vector<M>{s});
    DropoutMask<double> none;
    none.keep_prob = 0.5;
    none.scale = 2.0;
    none.mask = M(1, 3);
    auto a = sequence_forward(p, sb, Mode::eval, none);
    auto b = sequence_forward(cut, sb, Mode::eval);
    EXPECT_EQ(a.h, b.h) << to_string(kind);
  }
}
