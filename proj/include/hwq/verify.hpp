#pragma once

// Pointwise drift checks over enumerated states, generator-identity
// residuals, and sweeps of steady-state functionals across the scale r.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hwq/error.hpp"
#include "hwq/exact.hpp"
#include "hwq/functionals.hpp"
#include "hwq/model.hpp"
#include "hwq/policy.hpp"
#include "hwq/simulate.hpp"

namespace hwq {

inline constexpr double kSlackTolerance = 1e-12;

/// Closed-form drift of the workload: -min(Zhat, a_N) - sum_i nu_i Qhat_i / mu_i,
/// where a_N = (N - r)/sqrt(r) is the spare capacity of the integer server count.
inline double drift_phi(const MacroState& x, const SystemConfig& cfg) {
  const auto obs = scale_state(x, cfg);
  double v = -std::min(obs.z_hat_total, cfg.effective_a());
  for (std::size_t i = 0; i < cfg.num_classes(); ++i) v -= cfg.cls(i).nu * obs.q_hat_class[i] / cfg.cls(i).mu;
  return v;
}

/// Constant of the exponential Lyapunov inequality:
/// (sum lambda + (1 + a) mu_max) mu_min^{-2} exp(1/mu_min).
inline double lyapunov_c1(const SystemConfig& cfg) {
  const double mu_min = cfg.mu_min();
  return (cfg.lambda_sum() + (1.0 + cfg.effective_a()) * cfg.mu_max()) / (mu_min * mu_min) * std::exp(1.0 / mu_min);
}

struct DriftRow {
  MacroState state;
  double value = 0.0;  // A applied to the test function
  double lower = -INFINITY;
  double upper = INFINITY;
  double slack = 0.0;  // min(upper - value, value - lower)
};

struct DriftReport {
  std::string check;
  std::vector<DriftRow> rows;
  std::uint64_t violations = 0;
  double min_slack = INFINITY;
};

namespace detail {

inline void add_row(DriftReport& rep, DriftRow row, double scale) {
  row.slack = std::min(row.upper - row.value, row.value - row.lower);
  rep.min_slack = std::min(rep.min_slack, row.slack);
  if (row.slack < -kSlackTolerance * std::max(scale, 1.0)) ++rep.violations;
  rep.rows.push_back(std::move(row));
}

}  // namespace detail

/// Checks  A exp(theta Phihat) <= exp(theta Phihat) [-theta Zhat_a + theta^2 c1 / 2]
/// at every state with sum(Z) <= K. Requires nu == 0 and theta <= 1.
inline DriftReport lyapunov_pointwise_check(const SystemConfig& cfg, PolicyKind kind, double theta, int truncation) {
  if (cfg.nu_max() != 0.0) throw Error(Errc::HypothesisViolated, "exponential Lyapunov check requires nu == 0");
  if (!(theta >= 0.0) || theta > 1.0) throw Error(Errc::ThetaOutOfRange, "need 0 <= theta <= 1");
  const StateIndex idx = enumerate_states(cfg, kind, truncation);
  const Functional phi = functionals::phi_hat(cfg);
  const Functional lyap = [&phi, theta](const MacroState& s) { return std::exp(theta * phi(s)); };
  const double c1 = lyapunov_c1(cfg);
  const double a = cfg.effective_a();
  const double step = 1.0 / (cfg.mu_min() * cfg.sqrt_r());
  DriftReport rep{"lyapunov_exp_phi", {}, 0, INFINITY};
  rep.rows.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const PolicyState x = idx.policy_state(i);
    const double base = lyap(x.macro());
    const double z_a = std::min(scale_state(x.macro(), cfg).z_hat_total, a);
    DriftRow row;
    row.state = x.macro();
    row.value = abar_apply(lyap, x, cfg);
    row.upper = base * (-theta * z_a + 0.5 * theta * theta * c1);
    detail::add_row(rep, std::move(row), base * total_rate(x.macro(), cfg) * theta * step);
  }
  return rep;
}

/// Checks  -Zhat_a - c25 sum Zhat_i^+  <=  A Phihat  <=  -Zhat_a - c1 Phihat^+ + c2 sum Zhat_i^- + c3.
inline DriftReport drift_bounds_abandon_check(const SystemConfig& cfg, PolicyKind kind, int truncation) {
  if (!(cfg.nu_min() > 0.0)) throw Error(Errc::HypothesisViolated, "abandonment drift bounds require every nu_i > 0");
  const StateIndex idx = enumerate_states(cfg, kind, truncation);
  const Functional phi = functionals::phi_hat(cfg);
  const double a = cfg.effective_a();
  const double c1 = cfg.nu_min() * cfg.mu_min() / cfg.mu_max();
  const double c2 = cfg.nu_min() / cfg.mu_max();
  const double c3 = c2 * a;
  const double c25 = cfg.nu_max() / cfg.mu_min();
  const double step = 1.0 / (cfg.mu_min() * cfg.sqrt_r());
  DriftReport rep{"abandon_drift_bounds", {}, 0, INFINITY};
  rep.rows.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const PolicyState x = idx.policy_state(i);
    const auto obs = scale_state(x.macro(), cfg);
    const double z_a = std::min(obs.z_hat_total, a);
    DriftRow row;
    row.state = x.macro();
    row.value = abar_apply(phi, x, cfg);
    row.upper = -z_a - c1 * std::max(obs.phi_hat, 0.0) + c2 * obs.z_neg_sum() + c3;
    row.lower = -z_a - c25 * obs.z_pos_sum();
    detail::add_row(rep, std::move(row), total_rate(x.macro(), cfg) * step);
  }
  return rep;
}

struct DriftIdentityReport {
  std::uint64_t interior_states = 0;
  double max_relative_error = 0.0;
};

/// Compares A Phihat on the truncated generator with drift_phi at every interior state.
inline DriftIdentityReport drift_identity_check(const SystemConfig& cfg, PolicyKind kind, int truncation) {
  const StateIndex idx = enumerate_states(cfg, kind, truncation);
  const SparseGenerator gen = build_generator(idx, cfg);
  const std::vector<double> phi = tabulate(idx, functionals::phi_hat(cfg));
  DriftIdentityReport rep;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (gen.boundary[i]) continue;
    const double lhs = abar_apply(phi, i, gen);
    const double rhs = drift_phi(idx.macro(i), cfg);
    const double rel = std::abs(lhs - rhs) / std::max({1.0, std::abs(lhs), std::abs(rhs)});
    rep.max_relative_error = std::max(rep.max_relative_error, rel);
    ++rep.interior_states;
  }
  return rep;
}

struct IdentityRow {
  std::string function;
  double residual = 0.0;
  double deficit = 0.0;
  double roundoff = 0.0;
  bool pass = false;  // residual <= 1e-8 + deficit + roundoff
};

inline constexpr double kIdentityTolerance = 1e-8;

/// |E_pi A F| for F in {exp(theta Phihat_(k)), exp(-theta Phihat), exp(theta Phihat_(k)^2)}.
inline std::vector<IdentityRow> generator_identity_check(const SystemConfig& cfg, PolicyKind kind, double theta,
                                                         double k, int truncation) {
  const ExactSolution sol = solve_exact(cfg, kind, truncation);
  const std::vector<std::pair<std::string, Functional>> fs = {
      {"exp_theta_phi_k", functionals::exp_phi_truncated(cfg, theta, k)},
      {"exp_minus_theta_phi", functionals::exp_neg_phi(cfg, theta)},
      {"exp_theta_phi_k_sq", functionals::exp_phi_truncated_square(cfg, theta, k)},
      {"constant", functionals::constant(1.0)},
  };
  std::vector<IdentityRow> out;
  for (const auto& [name, f] : fs) {
    const auto gi = generator_identity(sol.stationary, sol.index, cfg, f);
    out.push_back({name, gi.residual, gi.deficit, gi.roundoff,
                   gi.residual <= kIdentityTolerance + gi.deficit + gi.roundoff});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

struct EstimatorSettings {
  enum class Choice { Auto, Exact, Regenerative, BatchMeans } choice = Choice::Auto;
  std::uint64_t exact_max_states = 20000;
  double regenerative_max_r = 4.0;
  std::uint64_t cycles = 10000;
  std::uint64_t max_events_per_cycle = 1'000'000;
  std::uint64_t batches = 20;
  std::uint64_t events_per_batch = 0;  // 0: 2000 events per server
  std::optional<std::uint64_t> warmup;  // default 10 N
};

struct SweepRow {
  double r = 0.0;
  double theta = 0.0;  // functional parameter (x for queue_tail)
  functionals::SweepFunctional functional = functionals::SweepFunctional::MgfPos;
  double estimate = 0.0;
  double half_width = 0.0;
  EstimatorMethod method = EstimatorMethod::Exact;
  std::uint64_t stream = 0;
};

struct SweepSpec {
  std::vector<ClassParams> classes;
  double a = 1.0;
  PolicyKind kind = PolicyKind::Fifo;
  std::vector<double> r_list;
  std::vector<double> theta_list;
  std::vector<functionals::SweepFunctional> functionals;
  double k = 5.0;  // truncation level of trunc_sq_mgf
  EstimatorSettings estimator;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

namespace detail {

inline std::vector<SweepRow> sweep_point(const SweepSpec& spec, std::size_t r_index) {
  const SystemConfig cfg = build_config(spec.classes, spec.r_list[r_index], spec.a);
  std::vector<Functional> fs;
  std::vector<SweepRow> rows;
  for (auto id : spec.functionals) {
    for (double theta : spec.theta_list) {
      fs.push_back(functionals::make(id, cfg, theta, spec.k));
      rows.push_back({cfg.r(), theta, id, 0.0, 0.0, EstimatorMethod::Exact, r_index});
    }
  }
  using Choice = EstimatorSettings::Choice;
  const auto& est = spec.estimator;
  const int truncation = default_truncation(cfg);
  const bool solvable = spec.kind != PolicyKind::Fifo && count_states(cfg, spec.kind, truncation) <= est.exact_max_states;
  if (est.choice == Choice::Exact && !solvable)
    throw Error(Errc::Unsupported, "instance at r=" + std::to_string(cfg.r()) + " is not exactly solvable");

  if (est.choice == Choice::Exact || (est.choice == Choice::Auto && solvable)) {
    const ExactSolution sol = solve_exact(cfg, spec.kind, truncation);
    for (std::size_t j = 0; j < fs.size(); ++j) rows[j].estimate = sol.expect(fs[j]);
    return rows;
  }

  RngStream rng(spec.seed, r_index);
  std::vector<StationaryEstimate> values;
  bool done = false;
  if (est.choice == Choice::Regenerative || (est.choice == Choice::Auto && cfg.r() <= est.regenerative_max_r)) {
    try {
      values = regenerative_estimate(cfg, spec.kind, fs, est.cycles, rng, est.max_events_per_cycle);
      done = true;
    } catch (const Error& e) {
      if (est.choice == Choice::Regenerative || e.code() != Errc::CycleTimeout) throw;
      rng = RngStream(spec.seed, r_index);
    }
  }
  if (!done) {
    const std::uint64_t per_batch =
        est.events_per_batch ? est.events_per_batch : 2000ULL * static_cast<std::uint64_t>(cfg.n_servers());
    values = batch_means_estimate(cfg, spec.kind, fs, est.batches, per_batch, est.warmup.value_or(default_warmup(cfg)),
                                  rng);
  }
  for (std::size_t j = 0; j < fs.size(); ++j) {
    rows[j].estimate = values[j].value;
    rows[j].half_width = values[j].half_width;
    rows[j].method = values[j].method;
  }
  return rows;
}

}  // namespace detail

/// One row per (r, functional, theta). Each r uses its own random stream
/// (seed, index of r), so results do not depend on the thread count.
inline std::vector<SweepRow> sweep(const SweepSpec& spec) {
  if (spec.r_list.empty()) throw Error(Errc::InvalidArgument, "r_list is empty");
  auto per_r = parallel_map(spec.r_list.size(), spec.threads,
                            [&](std::size_t i) { return detail::sweep_point(spec, i); });
  std::vector<SweepRow> out;
  for (auto& rows : per_r) out.insert(out.end(), rows.begin(), rows.end());
  return out;
}

struct Trend {
  double slope = 0.0;
  double half_width = 0.0;  // 95%
  bool flat() const { return std::abs(slope) <= half_width; }
};

/// Weighted least-squares slope of log(estimate) against log(r); each point's
/// standard error is its half-width / (1.96 * estimate) (delta method).
/// Exact points get a floor of 1e-12 on their standard error.
inline Trend log_log_trend(const std::vector<SweepRow>& rows) {
  if (rows.size() < 2) throw Error(Errc::InvalidArgument, "need at least two points for a trend");
  double sw = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (const auto& row : rows) {
    const double se = std::max(row.half_width / (kNormal975 * row.estimate), 1e-12);
    const double w = 1.0 / (se * se);
    const double x = std::log(row.r);
    const double y = std::log(row.estimate);
    sw += w;
    sx += w * x;
    sy += w * y;
    sxx += w * x * x;
    sxy += w * x * y;
  }
  const double det = sw * sxx - sx * sx;
  Trend t;
  t.slope = (sw * sxy - sx * sy) / det;
  t.half_width = kNormal975 * std::sqrt(sw / det);
  return t;
}

}  // namespace hwq
