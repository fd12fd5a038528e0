#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "hwq/exact.hpp"
#include "hwq/functionals.hpp"

using namespace hwq;

namespace {

SystemConfig mm2() { return build_config({{1.0, 1.0, 0.0}}, 1.0, 1.0); }

// Birth-death oracle: pi_n proportional to prod_{k<n} birth / death(k+1).
std::vector<double> birth_death(double birth, int n_servers, double mu, int top) {
  std::vector<double> pi(top + 1, 1.0);
  for (int n = 1; n <= top; ++n) pi[n] = pi[n - 1] * birth / (mu * std::min(n, n_servers));
  double total = 0.0;
  for (double v : pi) total += v;
  for (double& v : pi) v /= total;
  return pi;
}

double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  double tv = 0.0;
  for (std::size_t i = 0; i < std::max(p.size(), q.size()); ++i)
    tv += std::abs((i < p.size() ? p[i] : 0.0) - (i < q.size() ? q[i] : 0.0));
  return 0.5 * tv;
}

// Single-class law of Z, indexed by Z.
std::vector<double> marginal_total(const ExactSolution& sol) {
  std::vector<double> out(sol.index.truncation() + 1, 0.0);
  for (std::size_t i = 0; i < sol.index.size(); ++i) out[sol.index.macro(i).total()] += sol.stationary.pi[i];
  return out;
}

}  // namespace

TEST(EnumerateStates, Counts) {
  EXPECT_EQ(enumerate_states(mm2(), PolicyKind::PreemptivePriority, 5).size(), 6u);

  const auto two = build_config({{0.5, 1.0, 0.0}, {0.5, 1.0, 0.0}}, 1.0, 1.0);
  const auto pre = enumerate_states(two, PolicyKind::PreemptivePriority, 2);
  ASSERT_EQ(pre.size(), 6u);
  std::set<Counts> zs;
  for (std::size_t i = 0; i < pre.size(); ++i) zs.insert(pre.macro(i).z);
  EXPECT_EQ(zs, (std::set<Counts>{{0, 0}, {1, 0}, {0, 1}, {2, 0}, {1, 1}, {0, 2}}));
  // level order
  for (std::size_t i = 1; i < pre.size(); ++i) EXPECT_LE(pre.macro(i - 1).total(), pre.macro(i).total());

  const auto np = enumerate_states(2, 1, PolicyKind::NonPreemptivePriority, 1);
  ASSERT_EQ(np.size(), 3u);
  std::set<std::pair<Counts, Counts>> pairs;
  for (std::size_t i = 0; i < np.size(); ++i) pairs.insert({np.macro(i).z, np.macro(i).psi});
  EXPECT_EQ(pairs, (std::set<std::pair<Counts, Counts>>{{{0, 0}, {0, 0}}, {{1, 0}, {1, 0}}, {{0, 1}, {0, 1}}}));

  for (int k : {4, 7, 10}) {
    EXPECT_EQ(count_states(two, PolicyKind::PreemptivePriority, k),
              enumerate_states(two, PolicyKind::PreemptivePriority, k).size());
    EXPECT_EQ(count_states(two, PolicyKind::NonPreemptivePriority, k),
              enumerate_states(two, PolicyKind::NonPreemptivePriority, k).size());
  }
}

TEST(EnumerateStates, Errors) {
  try {
    enumerate_states(mm2(), PolicyKind::Fifo, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::Unsupported);
  }
  try {
    enumerate_states(mm2(), PolicyKind::PreemptivePriority, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TruncationTooSmall);
  }
}

TEST(BuildGenerator, MM2BirthDeath) {
  const auto cfg = mm2();
  const auto idx = enumerate_states(cfg, PolicyKind::PreemptivePriority, 8);
  const auto gen = build_generator(idx, cfg);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int z = idx.macro(i).total();
    std::map<int, double> out;
    for (std::size_t k = gen.row_ptr[i]; k < gen.row_ptr[i + 1]; ++k) out[idx.macro(gen.col[k]).total()] += gen.rate[k];
    if (z < 8) {
      EXPECT_DOUBLE_EQ(out[z + 1], 1.0);
    }
    if (z > 0) {
      EXPECT_DOUBLE_EQ(out[z - 1], std::min(z, 2));
    }
    // row sums vanish
    double row = gen.diag[i];
    for (std::size_t k = gen.row_ptr[i]; k < gen.row_ptr[i + 1]; ++k) row += gen.rate[k];
    EXPECT_EQ(row, 0.0);
    EXPECT_EQ(gen.boundary[i] != 0, z == 8);
  }
}

TEST(BuildGenerator, PreemptedClassAbandons) {
  // N = 1, Z = (1, 1): class 1 holds the server, class 0 waits
  const auto cfg = build_config({{0.5, 1.0, 0.7}, {1.0, 2.0, 0.3}}, 1.0, 1.0);
  const auto x = PolicyState::from_counts(1, {1, 1});
  std::map<std::pair<int, int>, double> deps;
  for_each_transition(x, cfg, [&](Event e, double rate, const PolicyState&) {
    if (e.kind != EventKind::Arrival) deps[{static_cast<int>(e.kind), e.cls}] = rate;
  });
  ASSERT_EQ(deps.size(), 2u);
  EXPECT_DOUBLE_EQ((deps[{static_cast<int>(EventKind::ServiceCompletion), 1}]), 2.0);
  EXPECT_DOUBLE_EQ((deps[{static_cast<int>(EventKind::Abandonment), 0}]), 0.7);
}

TEST(Stationary, MM2MeanAndLaw) {
  const auto sol = solve_exact(mm2(), PolicyKind::PreemptivePriority, 60);
  EXPECT_NEAR(sol.expect(functionals::total_count()), 4.0 / 3.0, 1e-10);
  EXPECT_LE(total_variation(marginal_total(sol), birth_death(1.0, 2, 1.0, 60)), 1e-12);
  double mass = 0.0;
  for (double v : sol.stationary.pi) {
    EXPECT_GE(v, 0.0);
    mass += v;
  }
  EXPECT_NEAR(mass, 1.0, 1e-12);
}

TEST(Stationary, PoissonWhenAbandonmentEqualsService) {
  const auto cfg = build_config({{1.0, 1.0, 1.0}}, 25, 1);
  const auto sol = solve_exact(cfg, PolicyKind::PreemptivePriority, 25 + 12 * 5);
  std::vector<double> poisson(200);
  for (long n = 0; n < 200; ++n) poisson[n] = poisson_pmf(25.0, n);
  EXPECT_LE(total_variation(marginal_total(sol), poisson), 1e-8);
}

TEST(Stationary, ResidualRelativeToMaxRate) {
  for (auto kind : {PolicyKind::PreemptivePriority, PolicyKind::NonPreemptivePriority}) {
    const auto cfg = build_config({{0.5, 1.0, 0.5}, {1.0, 2.0, 1.0}}, 16, 1);
    const auto sol = solve_exact(cfg, kind);
    EXPECT_LE(sol.stationary.residual, 1e-10 * sol.generator.max_exit_rate()) << to_string(kind);
  }
}

TEST(Stationary, GthAgreesWithPowerIteration) {
  const auto cfg = build_config({{0.5, 1.0, 0.5}, {1.0, 2.0, 0.0}}, 4, 1);
  for (auto kind : {PolicyKind::PreemptivePriority, PolicyKind::NonPreemptivePriority}) {
    const auto idx = enumerate_states(cfg, kind, 30);
    const auto gen = build_generator(idx, cfg);
    const auto gth = stationary(gen, {SolverMethod::Gth});
    const auto pow = stationary(gen, {SolverMethod::PowerIteration, 1e-13});
    EXPECT_LE(total_variation(gth.pi, pow.pi), 1e-9) << to_string(kind);
  }
}

TEST(Stationary, PowerIterationBudget) {
  const auto cfg = build_config({{1.0, 1.0, 0.0}}, 16, 1);
  const auto idx = enumerate_states(cfg, PolicyKind::PreemptivePriority, 80);
  const auto gen = build_generator(idx, cfg);
  try {
    stationary(gen, {SolverMethod::PowerIteration, 1e-12, 10});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotConverged);
  }
}

TEST(Stationary, SingleState) {
  SparseGenerator g;
  g.n = 1;
  g.row_ptr = {0, 0};
  g.diag = {0.0};
  g.boundary = {0};
  g.dropped_rate = {0.0};
  EXPECT_EQ(stationary(g).pi, std::vector<double>({1.0}));
}

// Instances with abandonment have Gaussian-scale tails; without it the queue
// tail is geometric and a 12 sqrt(r) margin is not enough at this precision.
TEST(Stationary, TruncationDoublingIsNegligible) {
  const std::vector<SystemConfig> cfgs = {
      build_config({{1.0, 1.0, 1.0}}, 25, 1),
      build_config({{1.0, 1.0, 1.0}}, 100, 1),
      build_config({{0.5, 1.0, 0.5}, {1.0, 2.0, 1.0}}, 16, 1),
  };
  for (const auto& cfg : cfgs) {
    const int k0 = static_cast<int>(std::ceil(cfg.r() + 12.0 * cfg.sqrt_r()));
    const auto small = solve_exact(cfg, PolicyKind::PreemptivePriority, k0);
    const auto big = solve_exact(cfg, PolicyKind::PreemptivePriority, 2 * k0);
    for (double theta : {0.1, 0.5}) {
      const auto f = functionals::mgf_pos(cfg, theta);
      EXPECT_LT(std::abs(small.expect(f) - big.expect(f)), 1e-8) << cfg.r() << " " << theta;
    }
  }
}

TEST(Stationary, GeometricTailWithoutAbandonmentIsFlagged) {
  const auto cfg = build_config({{1.0, 1.0, 0.0}}, 16, 1);
  const auto sol = solve_exact(cfg, PolicyKind::PreemptivePriority, 64);
  // queue beyond N is geometric with ratio 16/20
  EXPECT_NEAR(sol.stationary.boundary_mass / birth_death(16.0, 20, 1.0, 64)[64], 1.0, 1e-9);
  EXPECT_GT(sol.stationary.truncation_deficit, 1e-5);
}

TEST(AbarApply, ConstantAndDriftExamples) {
  const auto cfg = build_config({{0.5, 1.0, 0.0}, {1.0, 2.0, 0.0}}, 16, 1);
  const auto idx = enumerate_states(cfg, PolicyKind::NonPreemptivePriority, 40);
  const auto gen = build_generator(idx, cfg);
  const auto one = tabulate(idx, functionals::constant(3.0));
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(abar_apply(one, i, gen), 0.0);

  // nu = 0: A Phihat = -min(Zhat, a) away from the boundary
  const auto phi = functionals::phi_hat(cfg);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (gen.boundary[i]) continue;
    const double zhat = (idx.macro(i).total() - 16.0) / 4.0;
    EXPECT_NEAR(abar_apply(phi, i, idx, gen), -std::min(zhat, 1.0), 1e-12);
  }

  // with abandonment, single class mu = 1: -min(Zhat, a) - nu Qhat
  const auto ab = build_config({{1.0, 1.0, 0.5}}, 16, 1);
  const auto abphi = functionals::phi_hat(ab);
  for (int z : {0, 10, 20, 25, 40}) {
    const auto x = PolicyState::from_counts(ab, {z});
    const double zhat = (z - 16.0) / 4.0;
    const double qhat = std::max(z - 20, 0) / 4.0;
    EXPECT_NEAR(abar_apply(abphi, x, ab), -std::min(zhat, 1.0) - 0.5 * qhat, 1e-12) << z;
  }
}

TEST(GeneratorIdentity, Examples) {
  const auto cfg = mm2();
  const auto sol = solve_exact(cfg, PolicyKind::PreemptivePriority, 60);
  const auto c = generator_identity(sol.stationary, sol.index, cfg, functionals::constant(1.0));
  EXPECT_EQ(c.residual, 0.0);
  const Functional capped = [](const MacroState& s) { return std::min(s.total(), 3) * 1.0; };
  EXPECT_LE(generator_identity(sol.stationary, sol.index, cfg, capped).residual, 1e-9);

  const auto two = build_config({{0.5, 1.0, 0.0}, {1.0, 2.0, 0.0}}, 16, 1);
  const auto s2 = solve_exact(two, PolicyKind::PreemptivePriority);
  const auto gi = generator_identity(s2.stationary, s2.index, two, functionals::exp_phi_truncated(two, 0.2, 5.0));
  EXPECT_LE(gi.residual, 1e-8);
}
