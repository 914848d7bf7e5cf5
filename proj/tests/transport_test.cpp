#include "tsca/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "tsca/errors.hpp"

namespace tsca {
namespace {

using testing::random_simplex;
using testing::random_tensor;

Tensor row_sums(const Tensor& m) {
  Tensor out(m.rows(), 1);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out[i] += m(i, j);
  }
  return out;
}

// Double-loop conditional transport: normalizes, builds both plans entry by
// entry and sums plan × cost.
double brute_force_ct(const DiscreteDistribution& p, const DiscreteDistribution& q, double psi) {
  const std::size_t d = p.points.rows();
  const std::size_t n = p.size();
  const std::size_t m = q.size();
  auto norm = [&](const Tensor& x, std::size_t c) {
    double s = 0.0;
    for (std::size_t r = 0; r < d; ++r) s += x(r, c) * x(r, c);
    return std::sqrt(s);
  };
  std::vector<std::vector<double>> cosine(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t r = 0; r < d; ++r) dot += p.points(r, i) * q.points(r, j);
      cosine[i][j] = dot / (norm(p.points, i) * norm(q.points, j));
    }
  }
  const double scale = std::exp(-psi);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += q.weights[j] * std::exp(cosine[i][j] * scale);
    for (std::size_t j = 0; j < m; ++j) {
      const double t = p.weights[i] * q.weights[j] * std::exp(cosine[i][j] * scale) / z;
      total += t * (1.0 - cosine[i][j]);
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += p.weights[i] * std::exp(cosine[i][j] * scale);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = q.weights[j] * p.weights[i] * std::exp(cosine[i][j] * scale) / z;
      total += t * (1.0 - cosine[i][j]);
    }
  }
  return total;
}

DiscreteDistribution random_distribution(std::mt19937_64& rng, std::size_t d, std::size_t n) {
  return {random_tensor(rng, d, n), random_simplex(rng, n)};
}

TransportPlan plan_from_conditional(const Tensor& conditional) {
  const Tensor marginal(conditional.rows(), 1, 1.0 / static_cast<double>(conditional.rows()));
  Tensor joint = conditional;
  for (std::size_t i = 0; i < joint.rows(); ++i) {
    for (std::size_t j = 0; j < joint.cols(); ++j) joint(i, j) *= marginal[i];
  }
  return {joint, marginal, conditional};
}

// ---- costs and similarities ----------------------------------------------

TEST(Cost, IdenticalOrthogonalAntipodal) {
  const Tensor e1 = Tensor::column({1.0, 0.0});
  // The 1e-12 normalization guard leaves a residue of that order.
  EXPECT_NEAR(cost_matrix(e1, e1).item(), 0.0, 1e-11);
  EXPECT_NEAR(cost_matrix(e1, Tensor::column({0.0, 3.0})).item(), 1.0, 1e-11);
  EXPECT_NEAR(cost_matrix(e1, Tensor::column({-2.0, 0.0})).item(), 2.0, 1e-11);
}

TEST(Cost, EntriesStayInRange) {
  std::mt19937_64 rng(1);
  const Tensor c = cost_matrix(random_tensor(rng, 5, 6), random_tensor(rng, 5, 7));
  for (double v : c.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2.0);
  }
}

TEST(Similarity, RawGramAtZeroTemperature) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor(rng, 3, 2);
  const Tensor y = random_tensor(rng, 3, 4);
  EXPECT_LE(max_abs_diff(similarity_matrix(x, y, {0.0}),
                         kernels::matmul(kernels::transpose(x), y)),
            1e-15);
  const Tensor cold = similarity_matrix(x, y, {200.0});
  for (double v : cold.data()) EXPECT_LT(std::abs(v), 1e-80);
}

TEST(Similarity, HalvedByLogTwo) {
  const Tensor s =
      similarity_matrix(Tensor::column({1.0, 0.0}), Tensor::column({2.0, 0.0}), {std::log(2.0)});
  EXPECT_NEAR(s.item(), 1.0, 1e-15);
}

// ---- plans -----------------------------------------------------------------

TEST(ForwardPlan, EqualSimilaritiesGiveIndependentCoupling) {
  const Tensor theta = Tensor::column({0.2, 0.8});
  const Tensor alpha = Tensor::column({0.5, 0.3, 0.2});
  const TransportPlan plan = forward_plan(theta, alpha, Tensor(2, 3, 0.7));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(plan.joint(i, j), theta[i] * alpha[j], 1e-15);
  }
}

TEST(ForwardPlan, HandEvaluatedTwoByOne) {
  const TransportPlan plan = forward_plan(Tensor::column({1.0}), Tensor::column({0.5, 0.5}),
                                          Tensor::rows_of({{std::log(2.0), 0.0}}));
  EXPECT_NEAR(plan.joint(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(plan.joint(0, 1), 1.0 / 3.0, 1e-15);
}

TEST(ForwardPlan, ZeroTargetWeightGetsNoMass) {
  const TransportPlan plan = forward_plan(Tensor::column({0.4, 0.6}), Tensor::column({0.0, 1.0}),
                                          Tensor::rows_of({{5.0, 0.0}, {1.0, 2.0}}));
  EXPECT_EQ(plan.joint(0, 0), 0.0);
  EXPECT_EQ(plan.joint(1, 0), 0.0);
  EXPECT_NEAR(plan.joint(0, 1), 0.4, 1e-15);
  EXPECT_NO_THROW(plan.validate());
}

TEST(BackwardPlan, EqualSimilaritiesAndHandCase) {
  const Tensor theta = Tensor::column({0.25, 0.75});
  const TransportPlan plan = backward_plan(theta, Tensor::column({1.0}), Tensor(2, 1));
  ASSERT_EQ(plan.joint.rows(), 1u);
  EXPECT_NEAR(plan.joint(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(plan.joint(0, 1), 0.75, 1e-15);
}

TEST(BackwardPlan, MirrorsForwardOfTranspose) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor theta = random_simplex(rng, 4);
    const Tensor alpha = random_simplex(rng, 6);
    const Tensor s = random_tensor(rng, 4, 6, -4.0, 4.0);
    const TransportPlan b = backward_plan(theta, alpha, s);
    const TransportPlan f = forward_plan(alpha, theta, kernels::transpose(s));
    EXPECT_EQ(b.joint, f.joint);
    EXPECT_EQ(b.conditional, f.conditional);
  }
}

TEST(Plans, MarginalsHoldOverRandomInstances) {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<std::size_t> size(1, 9);
    const std::size_t n = size(rng);
    const std::size_t m = size(rng);
    const Tensor theta = random_simplex(rng, n);
    const Tensor alpha = random_simplex(rng, m);
    const Tensor s = random_tensor(rng, n, m, -30.0, 30.0);
    const TransportPlan f = forward_plan(theta, alpha, s);
    const TransportPlan b = backward_plan(theta, alpha, s);
    worst = std::max(worst, max_abs_diff(row_sums(f.joint), theta));
    worst = std::max(worst, max_abs_diff(row_sums(b.joint), alpha));
    for (double v : f.joint.data()) EXPECT_GE(v, 0.0);
    EXPECT_LE(max_abs_diff(row_sums(f.conditional), Tensor(n, 1, 1.0)), 1e-9);
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(Plans, RowShiftLeavesForwardRowUnchanged) {
  std::mt19937_64 rng(5);
  const Tensor theta = random_simplex(rng, 3);
  const Tensor alpha = random_simplex(rng, 5);
  const Tensor s = random_tensor(rng, 3, 5, -2.0, 2.0);
  Tensor shifted = s;
  for (std::size_t j = 0; j < 5; ++j) shifted(1, j) += 3.75;
  const TransportPlan a = forward_plan(theta, alpha, s);
  const TransportPlan b = forward_plan(theta, alpha, shifted);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(a.joint(1, j), b.joint(1, j), 1e-12);
}

TEST(Plans, SharpTemperatureConcentratesOnWeightedArgmax) {
  // Gram entries are separated by at least 0.05, so exp(20) scaling makes
  // the alpha factor irrelevant and every conditional row one-hot.
  const Tensor x = Tensor::rows_of({{1.0, 0.0, 0.6}, {0.0, 1.0, 0.8}});
  const Tensor y = Tensor::rows_of({{0.9, 0.1, -1.0}, {0.2, 0.95, 0.0}});
  const Tensor alpha = Tensor::column({0.2, 0.3, 0.5});
  const Tensor sim = similarity_matrix(x, y, {-20.0});
  const TransportPlan plan = forward_plan(Tensor::column({0.3, 0.3, 0.4}), alpha, sim);
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < 3; ++j) {
      if (std::log(alpha[j]) + sim(i, j) > std::log(alpha[best]) + sim(i, best)) best = j;
    }
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(plan.conditional(i, j), j == best ? 1.0 : 0.0, 1e-12) << i << "," << j;
    }
  }
}

// ---- CT distances ------------------------------------------------------------

TEST(CtDistance, SinglePointCases) {
  const DiscreteDistribution p{Tensor::column({1.0, 2.0}), Tensor::column({1.0})};
  EXPECT_NEAR(ct_distance(p, p, {0.0}).distance, 0.0, 1e-11);
  const DiscreteDistribution q{Tensor::column({-2.0, 1.0}), Tensor::column({1.0})};
  EXPECT_NEAR(ct_distance(p, q, {0.0}).distance, 2.0, 1e-11);
}

TEST(CtDistance, MatchesBruteForce) {
  std::mt19937_64 rng(6);
  const auto p = random_distribution(rng, 4, 5);
  const auto q = random_distribution(rng, 4, 7);
  const double psi = std::log(0.07);
  EXPECT_NEAR(ct_distance(p, q, {psi}).distance, brute_force_ct(p, q, psi), 1e-10);
}

TEST(CtDistance, NonNegativeAndZeroForIdenticalDirections) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    EXPECT_GE(ct_distance(random_distribution(rng, 3, 4), random_distribution(rng, 3, 2), {0.3})
                  .distance,
              0.0);
  }
  // Every point on the same ray: all costs vanish.
  const DiscreteDistribution a{Tensor::rows_of({{1.0, 2.0}, {1.0, 2.0}}), Tensor::column({0.5, 0.5})};
  const DiscreteDistribution b{Tensor::rows_of({{3.0}, {3.0}}), Tensor::column({1.0})};
  EXPECT_NEAR(ct_distance(a, b, {0.0}).distance, 0.0, 1e-11);
}

TriSet random_triset(std::mt19937_64& rng, std::size_t d, std::size_t n, std::size_t m,
                     std::size_t ns, std::size_t no) {
  TriSet t;
  t.patches = random_distribution(rng, d, n);
  t.compositions = random_distribution(rng, d, m);
  t.primitives = random_distribution(rng, d, ns + no);
  t.beta_state = random_simplex(rng, ns);
  t.beta_object = random_simplex(rng, no);
  t.num_states = ns;
  return t;
}

TEST(TotalCt, SumOfThreePairs) {
  std::mt19937_64 rng(8);
  const TriSet t = random_triset(rng, 4, 5, 3, 2, 3);
  const Temperature temp{-1.2};
  const TotalCtResult r = total_ct(t, temp);
  const double direct = ct_distance(t.patches, t.compositions, temp).distance +
                        ct_distance(t.patches, t.primitives, temp).distance +
                        ct_distance(t.compositions, t.primitives, temp).distance;
  EXPECT_EQ(r.total, r.patch_comp.distance + r.patch_prim.distance + r.comp_prim.distance);
  EXPECT_NEAR(r.total, direct, 1e-14);
  const double oracle = brute_force_ct(t.patches, t.compositions, temp.psi) +
                        brute_force_ct(t.patches, t.primitives, temp.psi) +
                        brute_force_ct(t.compositions, t.primitives, temp.psi);
  EXPECT_NEAR(r.total, oracle, 1e-10);
}

TEST(TotalCt, CollapsedTriSetIsZero) {
  TriSet t;
  const Tensor pt = Tensor::column({0.0, 1.0});
  t.patches = {pt, Tensor::column({1.0})};
  t.compositions = {pt, Tensor::column({1.0})};
  t.primitives = {pt, Tensor::column({1.0})};
  EXPECT_NEAR(total_ct(t, {0.0}).total, 0.0, 1e-10);
}

// ---- cycle -------------------------------------------------------------------

TEST(Cycle, IdentityPlansGiveIdentity) {
  const TransportPlan id = plan_from_conditional(Tensor::identity(3));
  EXPECT_EQ(cycle_matrix(id, id, id), Tensor::identity(3));
}

TEST(Cycle, PermutationRoundTrip) {
  const Tensor p = Tensor::rows_of({{0, 1, 0}, {0, 0, 1}, {1, 0, 0}});
  const TransportPlan forward = plan_from_conditional(p);
  const TransportPlan back = plan_from_conditional(kernels::transpose(p));
  EXPECT_EQ(cycle_matrix(forward, plan_from_conditional(Tensor::identity(3)), back),
            Tensor::identity(3));
}

TEST(Cycle, MatchesTripleProduct) {
  std::mt19937_64 rng(9);
  auto stochastic = [&](std::size_t r, std::size_t c) {
    Tensor t = random_tensor(rng, r, c, 0.1, 1.0);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += t(i, j);
      for (std::size_t j = 0; j < c; ++j) t(i, j) /= s;
    }
    return t;
  };
  const Tensor a = stochastic(2, 2);
  const Tensor b = stochastic(2, 2);
  const Tensor c = stochastic(2, 2);
  Tensor expected(2, 2);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t j = 0; j < 2; ++j) {
        for (std::size_t k = 0; k < 2; ++k) expected(i, l) += a(i, j) * b(j, k) * c(k, l);
      }
    }
  }
  const Tensor t22 =
      cycle_matrix(plan_from_conditional(a), plan_from_conditional(b), plan_from_conditional(c));
  EXPECT_LE(max_abs_diff(t22, expected), 1e-12);
}

TEST(Cycle, RowStochasticForRandomTriSets) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const TriSet t = random_triset(rng, 3, 4, 5, 2, 2);
    const TotalCtResult r = total_ct(t, {std::log(0.07)});
    const Tensor t22 = cycle_matrix(r.patch_comp.backward, r.patch_prim.forward, r.comp_prim.backward);
    ASSERT_EQ(t22.rows(), 5u);
    EXPECT_LE(max_abs_diff(row_sums(t22), Tensor(5, 1, 1.0)), 1e-9);
    Tensor power = t22;
    for (int k = 0; k < 4; ++k) power = kernels::matmul(power, t22);
    EXPECT_LE(max_abs_diff(row_sums(power), Tensor(5, 1, 1.0)), 1e-9);
  }
}

TEST(Cycle, DimensionMismatchIsContractError) {
  const TransportPlan a = plan_from_conditional(Tensor(2, 3, 1.0 / 3.0));
  const TransportPlan b = plan_from_conditional(Tensor(2, 2, 0.5));
  EXPECT_THROW(cycle_matrix(a, b, b), ContractError);
}

TEST(CycleLoss, ReferenceValues) {
  EXPECT_EQ(cycle_loss(Tensor::identity(4), 2), 0.0);
  EXPECT_NEAR(cycle_loss(Tensor(4, 4, 0.25), 1), 1.5, 1e-15);
  Tensor onehot(3, 3, 1.0 / 3.0);
  onehot(1, 0) = 0.0;
  onehot(1, 1) = 1.0;
  onehot(1, 2) = 0.0;
  EXPECT_EQ(cycle_loss(onehot, 1), 0.0);
  EXPECT_GT(cycle_loss(onehot, 0), 0.0);
  EXPECT_THROW(cycle_loss(Tensor::identity(3), 3), ContractError);
}

TEST(CycleLoss, BoundedByTwo) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor t = random_tensor(rng, 4, 4, 0.0, 1.0);
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 4; ++j) s += t(i, j);
      for (std::size_t j = 0; j < 4; ++j) t(i, j) /= s;
    }
    const double l = cycle_loss(t, static_cast<std::size_t>(trial % 4));
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 2.0);
  }
}

TEST(Transport, TotalCtPlusCycleGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  const std::size_t d = 3;
  std::vector<Tensor> params = {random_tensor(rng, d, 4), random_tensor(rng, d, 3),
                                random_tensor(rng, d, 4), random_tensor(rng, 4, 1),
                                random_tensor(rng, 3, 1), random_tensor(rng, 4, 1),
                                Tensor::scalar(-0.5)};
  Objective fn = tape_objective([](Tape&, std::span<const Var> p) {
    TriSetNode tri;
    tri.patches = {p[0], softmax_cols(p[3])};
    tri.compositions = {p[1], softmax_cols(p[4])};
    tri.primitives = {p[2], softmax_cols(p[5])};
    tri.num_states = 2;
    const TotalCtNode ct = total_ct(tri, TemperatureNodes::shared(p[6]));
    const Var t22 = cycle_matrix(ct.patch_comp.backward, ct.patch_prim.forward, ct.comp_prim.backward);
    return ct.total + cycle_loss(t22, 1);
  });
  EXPECT_LE(finite_diff_check(fn, params, 1e-6), 1e-4);
}

// ---- feasibility filter ---------------------------------------------------

TEST(Feasibility, HandComputedTwoByTwo) {
  // Pairs in state-major order: (0,0) (0,1) (1,0) (1,1); primitives s0 s1 o0 o1.
  const Tensor fwd = Tensor::rows_of({{0.4, 0.1, 0.3, 0.2},
                                      {0.25, 0.25, 0.25, 0.25},
                                      {0.1, 0.5, 0.2, 0.2},
                                      {0.0, 0.6, 0.1, 0.3}});
  const Tensor bwd = Tensor::rows_of({{0.5, 0.2, 0.2, 0.1},
                                      {0.1, 0.1, 0.4, 0.4},
                                      {0.3, 0.3, 0.3, 0.1},
                                      {0.25, 0.25, 0.25, 0.25}});
  const std::vector<Pair> pairs = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  const auto scores =
      feasibility_scores(plan_from_conditional(fwd), plan_from_conditional(bwd), pairs, 2);
  ASSERT_EQ(scores.size(), 4u);
  EXPECT_NEAR(scores[0], 0.4 * 0.3 + 0.5 * 0.3, 1e-15);     // 0.27
  EXPECT_NEAR(scores[1], 0.25 * 0.25 + 0.2 * 0.25, 1e-15);  // 0.1125
  EXPECT_NEAR(scores[2], 0.5 * 0.2 + 0.4 * 0.3, 1e-15);     // 0.22
  EXPECT_NEAR(scores[3], 0.6 * 0.3 + 0.4 * 0.25, 1e-15);    // 0.28
}

TEST(Feasibility, UniformPlansScoreEqually) {
  const std::vector<Pair> pairs = {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {2, 0}, {2, 1}};
  const auto scores = feasibility_scores(plan_from_conditional(Tensor(6, 5, 0.2)),
                                         plan_from_conditional(Tensor(5, 6, 1.0 / 6.0)), pairs, 3);
  for (double s : scores) EXPECT_NEAR(s, scores[0], 1e-15);
}

TEST(Feasibility, ConcentratedMassScoresHighest) {
  const std::vector<Pair> pairs = {{0, 0}, {0, 1}};
  Tensor fwd = Tensor::rows_of({{0.5, 0.0, 0.5, 0.0}, {0.5, 0.0, 0.25, 0.25}});
  const auto scores = feasibility_scores(plan_from_conditional(fwd),
                                         plan_from_conditional(Tensor(4, 2, 0.5)), pairs, 2);
  EXPECT_GT(scores[0], scores[1]);
}

TEST(Filter, QuantileThresholds) {
  const std::vector<double> s = {0.3, 0.1, 0.8, 0.5};
  EXPECT_EQ(quantile_threshold(s, 0.0), -std::numeric_limits<double>::infinity());
  EXPECT_EQ(quantile_threshold(s, 1.0), std::numeric_limits<double>::infinity());
  EXPECT_EQ(quantile_threshold(s, 0.5), 0.5);
  EXPECT_EQ(quantile_threshold(s, 0.3), 0.3);
  EXPECT_THROW(quantile_threshold(s, 1.5), ContractError);
}

TEST(Filter, QuantileZeroKeepsEverything) {
  const std::vector<double> s = {0.3, 0.1, 0.8, 0.5, 0.5};
  const auto r = filter_compositions(s, std::vector<bool>(5, false), FilterThreshold::at_quantile(0.0));
  EXPECT_EQ(r.kept, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Filter, QuantileOneKeepsExactlyTheSeen) {
  const std::vector<double> s = {0.3, 0.1, 0.8, 0.5, 0.4};
  const std::vector<bool> seen = {false, true, false, true, false};
  const auto r = filter_compositions(s, seen, FilterThreshold::at_quantile(1.0));
  EXPECT_EQ(r.kept, (std::vector<std::size_t>{1, 3}));
}

TEST(Filter, MedianKeepsTopHalfPlusSeen) {
  std::mt19937_64 rng(13);
  std::vector<double> scores(10);
  std::iota(scores.begin(), scores.end(), 1.0);
  std::shuffle(scores.begin(), scores.end(), rng);
  std::vector<bool> seen(10, false);
  seen[0] = seen[7] = true;
  const auto r = filter_compositions(scores, seen, FilterThreshold::at_quantile(0.5));
  // Sort oracle: the five largest scores (6..10) survive, plus seen entries.
  std::vector<std::size_t> expected;
  for (std::size_t i = 0; i < 10; ++i) {
    if (scores[i] >= 6.0 || seen[i]) expected.push_back(i);
  }
  EXPECT_EQ(r.kept, expected);
  EXPECT_EQ(r.threshold, 6.0);
}

TEST(Filter, StrictBelowRuleAndAbsoluteThreshold) {
  const std::vector<double> s = {0.3, 0.1, 0.8, 0.5};
  const std::vector<bool> none(4, false);
  EXPECT_EQ(filter_compositions(s, none, FilterThreshold::at(0.5)).kept,
            (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(filter_compositions(s, none, FilterThreshold::at(0.5), true, FilterRule::kKeepBelow).kept,
            (std::vector<std::size_t>{0, 1}));
  const std::vector<bool> seen = {true, false, false, false};
  EXPECT_EQ(filter_compositions(s, seen, FilterThreshold::at(0.9)).kept,
            (std::vector<std::size_t>{0}));
  EXPECT_EQ(filter_compositions(s, seen, FilterThreshold::at(0.5), false).kept,
            (std::vector<std::size_t>{2, 3}));
}

TEST(Filter, RemovingEverythingIsAnError) {
  const std::vector<double> s = {0.3, 0.1};
  EXPECT_THROW(filter_compositions(s, {false, false}, FilterThreshold::at(0.9)), ConfigError);
  EXPECT_THROW(filter_compositions(s, {false, false}, FilterThreshold::at_quantile(1.0)),
               ConfigError);
}

// ---- export ------------------------------------------------------------------

TEST(Export, CsvRoundTripIsExact) {
  std::mt19937_64 rng(14);
  const Tensor m = random_tensor(rng, 3, 5, -1e3, 1e3);
  std::stringstream ss;
  write_matrix_csv(ss, m);
  std::string header;
  std::getline(ss, header);
  EXPECT_EQ(header, "3,5");
  ss.seekg(0);
  EXPECT_EQ(read_matrix_csv(ss), m);
}

TEST(Export, CsvRejectsMalformedInput) {
  std::stringstream bad("2,2\n1,2\n3\n");
  EXPECT_THROW(read_matrix_csv(bad), ParseError);
}

TEST(Export, PgmHeaderMatchesPlanShape) {
  const Tensor m = Tensor::rows_of({{0.0, 0.5, 1.0}, {0.25, 0.75, 1.0}});
  std::stringstream ss;
  write_matrix_pgm(ss, m);
  std::string magic;
  std::size_t w = 0;
  std::size_t h = 0;
  int maxval = 0;
  ss >> magic >> w >> h >> maxval;
  ss.get();
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 3u);
  EXPECT_EQ(h, 2u);
  EXPECT_EQ(maxval, 255);
  std::string pixels((std::istreambuf_iterator<char>(ss)), std::istreambuf_iterator<char>());
  ASSERT_EQ(pixels.size(), 6u);
  EXPECT_EQ(static_cast<unsigned char>(pixels[0]), 0);
  EXPECT_EQ(static_cast<unsigned char>(pixels[2]), 255);
}

}  // namespace
}  // namespace tsca
