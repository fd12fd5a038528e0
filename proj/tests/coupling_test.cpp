#include <gtest/gtest.h>

#include <cmath>

#include "hwq/coupling.hpp"
#include "hwq/exact.hpp"
#include "hwq/functionals.hpp"
#include "support.hpp"

using namespace hwq;

namespace {

const std::vector<PolicyKind> kKinds = {PolicyKind::PreemptivePriority, PolicyKind::NonPreemptivePriority,
                                        PolicyKind::Fifo};

}  // namespace

TEST(InfServerRates, Bookkeeping) {
  // one class, mu = 2, nu = 1; N = 5 and Z = 9 gives Psi = 5, Q = 4
  const auto cfg = build_config({{2.0, 2.0, 1.0}}, 4, 0.5);
  ASSERT_EQ(cfg.n_servers(), 5);
  const InfServerJointState js{PolicyState::from_counts(cfg, {9}), {3}, {2}};
  const auto t = infserver_joint_rates(js, cfg)[0];
  EXPECT_DOUBLE_EQ(t.shared, 8.0);
  EXPECT_DOUBLE_EQ(t.g_only, 2.0);
  EXPECT_DOUBLE_EQ(t.z_only, 6.0);
  EXPECT_DOUBLE_EQ(t.g_marginal(), 2.0 * js.g(0));
  EXPECT_DOUBLE_EQ(t.z_marginal(), 2.0 * 5 + 1.0 * 4);
  EXPECT_DOUBLE_EQ(t.arrival, 8.0);
}

TEST(InfServerRates, NuEqualsMuAndEmpty) {
  const auto cfg = build_config({{1.0, 1.0, 1.0}}, 4, 0.5);
  const InfServerJointState js{PolicyState::from_counts(cfg, {8}), {5}, {3}};
  EXPECT_EQ(infserver_joint_rates(js, cfg)[0].g_only, 0.0);

  const auto two = build_config({{0.5, 1.0, 0.5}, {1.0, 2.0, 1.0}}, 4, 1);
  const auto empty = init_infserver_joint(two, PolicyKind::Fifo);
  for (const auto& t : infserver_joint_rates(empty, two)) {
    EXPECT_GT(t.arrival, 0.0);
    EXPECT_EQ(t.shared + t.g_only + t.z_only, 0.0);
  }
}

TEST(InfServerRates, HypothesisViolated) {
  const auto cfg = build_config({{1.0, 1.0, 1.5}}, 4, 1);
  try {
    RngStream rng(1, 0);
    run_infserver_coupled(cfg, PolicyKind::Fifo, {10}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::HypothesisViolated);
  }
}

TEST(Rematch, PrefersServers) {
  const auto cfg = build_config({{2.0, 2.0, 1.0}}, 4, 0.5);
  InfServerJointState js{PolicyState::from_counts(cfg, {9}), {0}, {7}};
  EXPECT_TRUE(rematch(js));
  EXPECT_EQ(js.matched_service[0], 5);
  EXPECT_EQ(js.matched_queue[0], 2);
}

TEST(InfServerCoupling, OrderingOverAMillionEvents) {
  const auto cfg = build_config({{0.5, 1.0, 0.5}, {1.0, 2.0, 1.0}}, 16, 1);
  for (auto kind : kKinds) {
    RngStream rng(21, 0);
    const auto rep = run_infserver_coupled(cfg, kind, {1'000'000, false}, rng);
    EXPECT_EQ(rep.ordering_violations, 0u) << to_string(kind) << " " << rep.first_violation;
    EXPECT_EQ(rep.events, 1'000'000u);
  }
}

TEST(InfServerCoupling, MarginalMeanIsRhoR) {
  const auto cfg = build_config({{0.5, 1.0, 0.5}, {1.0, 2.0, 1.0}}, 16, 1);
  std::vector<double> g0, g1;
  for (std::uint64_t k = 0; k < 10; ++k) {
    RngStream rng(31, k);
    double t = 0.0, a0 = 0.0, a1 = 0.0;
    std::uint64_t n = 0;
    run_infserver_coupled(cfg, PolicyKind::Fifo, {200000}, rng, [&](double dt, const InfServerJointState& js) {
      if (n++ < 20000) return;
      t += dt;
      a0 += dt * js.g(0);
      a1 += dt * js.g(1);
    });
    g0.push_back(a0 / t);
    g1.push_back(a1 / t);
  }
  const auto m0 = test::mean_sd(g0), m1 = test::mean_sd(g1);
  EXPECT_NEAR(m0.mean, 8.0, 3.0 * m0.sd_of_mean);
  EXPECT_NEAR(m1.mean, 8.0, 3.0 * m1.sd_of_mean);
}

TEST(InfServerCoupling, ScaledMgfMatchesClosedForm) {
  const auto cfg = build_config({{1.0, 1.0, 0.5}}, 100, 1);
  const double theta = 0.5;
  std::vector<double> est;
  for (std::uint64_t k = 0; k < 10; ++k) {
    RngStream rng(41, k);
    double t = 0.0, acc = 0.0;
    std::uint64_t n = 0;
    run_infserver_coupled(cfg, PolicyKind::Fifo, {400000}, rng, [&](double dt, const InfServerJointState& js) {
      if (n++ < 40000) return;
      t += dt;
      acc += dt * std::exp(theta * (js.g(0) - 100.0) / 10.0);
    });
    est.push_back(acc / t);
  }
  const auto m = test::mean_sd(est);
  EXPECT_NEAR(m.mean, scaled_poisson_mgf(theta, 1.0, 100.0), 3.0 * m.sd_of_mean);
}

TEST(InfServerCoupling, MarginalIsPoisson) {
  for (double r : {4.0, 25.0}) {
    const auto cfg = build_config({{0.5, 1.0, 0.5}, {1.0, 2.0, 1.0}}, r, 1);
    RngStream rng(51, static_cast<std::uint64_t>(r));
    const auto samples = test::sample_infserver_g(cfg, PolicyKind::Fifo, 1, 2000, 10.0, 20.0, rng);
    ASSERT_EQ(samples.size(), 2000u);
    EXPECT_GT(test::poisson_chi_square_pvalue(samples, 0.5 * r), 1e-4) << r;
  }
}

TEST(InfServerCoupling, PrimaryMarginalMatchesExact) {
  const auto cfg = build_config({{0.5, 1.0, 0.5}, {1.0, 2.0, 1.0}}, 4, 1);
  const double exact = solve_exact(cfg, PolicyKind::PreemptivePriority).expect(functionals::class_count(0));
  std::vector<double> est;
  for (std::uint64_t k = 0; k < 10; ++k) {
    RngStream rng(61, k);
    double t = 0.0, acc = 0.0;
    std::uint64_t n = 0;
    run_infserver_coupled(cfg, PolicyKind::PreemptivePriority, {200000}, rng,
                          [&](double dt, const InfServerJointState& js) {
                            if (n++ < 10000) return;
                            t += dt;
                            acc += dt * js.primary.macro().z[0];
                          });
    est.push_back(acc / t);
  }
  const auto m = test::mean_sd(est);
  EXPECT_NEAR(m.mean, exact, 3.0 * m.sd_of_mean);
}

TEST(Thinning, Examples) {
  EXPECT_DOUBLE_EQ(monotone_thinning_probability(3, 4, 2.0, 1.0, 1.0), 0.3);
  EXPECT_EQ(monotone_thinning_probability(3, 4, 2.0, 2.0, 1.0), 0.0);
  EXPECT_EQ(monotone_thinning_probability(3, 4, 0.0, 0.0, 1.0), 0.0);
  try {
    monotone_thinning_probability(0, 0, 1.0, 0.5, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DegenerateState);
  }
  EXPECT_THROW(monotone_thinning_probability(1, 1, 0.5, 1.0, 1.0), Error);
}

TEST(ShadowAllocation, MirrorsThenFillsAscending) {
  // primary N = 4 busy 3; shadow has extra customers in both classes
  const MacroState primary({1, 2}, {1, 2});
  EXPECT_EQ(shadow_allocation(primary, {3, 4}, 4), Counts({2, 2}));
  EXPECT_EQ(shadow_allocation(primary, {1, 4}, 4), Counts({1, 3}));
  const MacroState full({3, 3}, {1, 3});
  EXPECT_EQ(shadow_allocation(full, {5, 3}, 4), Counts({1, 3}));
}

TEST(MonotoneCoupling, EqualRatesTrackExactly) {
  const auto cfg = build_config({{0.5, 1.0, 0.5}, {1.0, 2.0, 1.0}}, 16, 1);
  for (auto kind : kKinds) {
    RngStream rng(71, 0);
    std::uint64_t mismatches = 0;
    run_monotone_coupled(cfg, {0.5, 1.0}, kind, {100000}, rng, [&](double, const MonotoneJointState& js) {
      if (js.z_shadow != js.primary.macro().z || js.psi_shadow != js.primary.macro().psi) ++mismatches;
    });
    EXPECT_EQ(mismatches, 0u) << to_string(kind);
  }
}

TEST(MonotoneCoupling, OrderingOverAMillionEvents) {
  const auto cfg = build_config({{0.5, 1.0, 1.0}, {1.0, 2.0, 1.0}}, 16, 1);
  for (auto kind : kKinds) {
    RngStream rng(81, 0);
    const auto rep = run_monotone_coupled(cfg, {0.0, 0.0}, kind, {1'000'000, false}, rng);
    EXPECT_EQ(rep.ordering_violations, 0u) << to_string(kind) << " " << rep.first_violation;
  }
}

TEST(MonotoneCoupling, RejectsLargerShadowRates) {
  const auto cfg = build_config({{1.0, 1.0, 0.5}}, 16, 1);
  RngStream rng(1, 0);
  EXPECT_THROW(run_monotone_coupled(cfg, {0.7}, PolicyKind::Fifo, {10}, rng), Error);
  EXPECT_THROW(run_monotone_coupled(cfg, {0.1, 0.1}, PolicyKind::Fifo, {10}, rng), Error);
}

// nu = 1 against nu' = 0 at r = 25: both marginals agree with exact solves and the gap is positive.
TEST(MonotoneCoupling, ShadowMeanDominates) {
  const auto cfg = build_config({{1.0, 1.0, 1.0}}, 25, 1);
  const auto shadow_cfg = cfg.with_nu({0.0});
  const double exact_z = solve_exact(cfg, PolicyKind::PreemptivePriority).expect(functionals::total_count());
  const double exact_shadow =
      solve_exact(shadow_cfg, PolicyKind::PreemptivePriority, 400).expect(functionals::total_count());
  std::vector<double> z, zs, gap;
  for (std::uint64_t k = 0; k < 10; ++k) {
    RngStream rng(91, k);
    double t = 0.0, a = 0.0, b = 0.0;
    std::uint64_t n = 0;
    run_monotone_coupled(cfg, {0.0}, PolicyKind::Fifo, {400000}, rng, [&](double dt, const MonotoneJointState& js) {
      if (n++ < 40000) return;
      t += dt;
      a += dt * js.primary.macro().z[0];
      b += dt * js.z_shadow[0];
    });
    z.push_back(a / t);
    zs.push_back(b / t);
    gap.push_back((b - a) / t);
  }
  const auto mz = test::mean_sd(z), ms = test::mean_sd(zs), mg = test::mean_sd(gap);
  EXPECT_NEAR(mz.mean, exact_z, 3.0 * mz.sd_of_mean);
  EXPECT_NEAR(ms.mean, exact_shadow, 3.0 * ms.sd_of_mean);
  EXPECT_GT(mg.mean, 3.0 * mg.sd_of_mean);
  EXPECT_GT(exact_shadow, exact_z);
}
