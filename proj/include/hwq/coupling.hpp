#pragma once

// Joint chains that realize two sample-path comparisons:
//  * the primary system against an infinite-server system with the same
//    arrivals and service rates (G_i <= Z_i), valid when nu_i <= mu_i;
//  * the primary system against a shadow with smaller abandonment rates
//    nu' <= nu (Z_i <= Z'_i, Psi_i <= Psi'_i).
// The primary chain is driven as a black box through PolicyState.

#include <cstdint>
#include <string>
#include <vector>

#include "hwq/error.hpp"
#include "hwq/model.hpp"
#include "hwq/policy.hpp"
#include "hwq/rng.hpp"
#include "hwq/simulate.hpp"

namespace hwq {

struct CouplingReport {
  std::uint64_t events = 0;
  std::uint64_t ordering_violations = 0;
  std::string first_violation;

  void record(std::uint64_t event, const std::string& what) {
    if (ordering_violations++ == 0) first_violation = "event " + std::to_string(event) + ": " + what;
  }
};

struct CouplingOptions {
  std::uint64_t n_events = 0;
  bool fail_fast = true;  // throw OrderingViolation on the first violation
};

// ---------------------------------------------------------------------------
// Infinite-server comparison

/// G_i = matched_service_i + matched_queue_i counts infinite-server customers,
/// each paired with a distinct class-i customer of the primary system.
struct InfServerJointState {
  PolicyState primary;
  Counts matched_service;
  Counts matched_queue;

  int g(std::size_t i) const { return matched_service[i] + matched_queue[i]; }
  Counts g_counts() const {
    Counts out(matched_service.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = g(i);
    return out;
  }
};

struct InfServerClassRates {
  double arrival = 0.0;      // both systems, new pair matched
  double shared = 0.0;       // mu*m_s + nu*m_q: a matched pair leaves together
  double g_only = 0.0;       // (mu - nu)*m_q: only the infinite-server partner leaves
  double z_only = 0.0;       // mu*(Psi - m_s) + nu*(Q - m_q): unmatched primary customer leaves
  double shared_service = 0.0;
  double shared_queue = 0.0;
  double z_only_service = 0.0;
  double z_only_queue = 0.0;

  double g_marginal() const { return shared + g_only; }
  double z_marginal() const { return shared + z_only; }
};

inline void require_nu_le_mu(const SystemConfig& cfg) {
  for (std::size_t i = 0; i < cfg.num_classes(); ++i)
    if (cfg.cls(i).nu > cfg.cls(i).mu)
      throw Error(Errc::HypothesisViolated, "class " + std::to_string(i) + " has nu > mu");
}

inline std::vector<InfServerClassRates> infserver_joint_rates(const InfServerJointState& js, const SystemConfig& cfg) {
  require_nu_le_mu(cfg);
  const auto& m = js.primary.macro();
  std::vector<InfServerClassRates> out(cfg.num_classes());
  for (std::size_t i = 0; i < cfg.num_classes(); ++i) {
    const auto& c = cfg.cls(i);
    auto& o = out[i];
    o.arrival = c.lambda * cfg.r();
    o.shared_service = c.mu * js.matched_service[i];
    o.shared_queue = c.nu * js.matched_queue[i];
    o.shared = o.shared_service + o.shared_queue;
    o.g_only = (c.mu - c.nu) * js.matched_queue[i];
    o.z_only_service = c.mu * (m.psi[i] - js.matched_service[i]);
    o.z_only_queue = c.nu * (m.q(i) - js.matched_queue[i]);
    o.z_only = o.z_only_service + o.z_only_queue;
  }
  return out;
}

/// Re-pairs G customers with in-service primary customers first.
inline bool rematch(InfServerJointState& js) {
  const auto& m = js.primary.macro();
  bool ok = true;
  for (std::size_t i = 0; i < m.z.size(); ++i) {
    const int g = js.g(i);
    js.matched_service[i] = std::min(g, m.psi[i]);
    js.matched_queue[i] = g - js.matched_service[i];
    if (js.matched_queue[i] > m.q(i)) ok = false;
  }
  return ok;
}

inline InfServerJointState init_infserver_joint(const SystemConfig& cfg, PolicyKind kind) {
  return {init_state(cfg, kind), Counts(cfg.num_classes(), 0), Counts(cfg.num_classes(), 0)};
}

/// Simulates the joint chain. `observe(dt, joint)` is called for each visited
/// state with its holding time, before the transition out of it.
template <class Observer>
CouplingReport run_infserver_coupled(const SystemConfig& cfg, PolicyKind kind, const CouplingOptions& opts,
                                     RngStream& rng, Observer&& observe) {
  require_nu_le_mu(cfg);
  const std::size_t d = cfg.num_classes();
  InfServerJointState js = init_infserver_joint(cfg, kind);
  CouplingReport report;
  std::vector<double> rates(6 * d);
  for (std::uint64_t n = 0; n < opts.n_events; ++n) {
    const auto table = infserver_joint_rates(js, cfg);
    double total = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const auto& t = table[i];
      rates[6 * i + 0] = t.arrival;
      rates[6 * i + 1] = t.shared_service;
      rates[6 * i + 2] = t.shared_queue;
      rates[6 * i + 3] = t.g_only;
      rates[6 * i + 4] = t.z_only_service;
      rates[6 * i + 5] = t.z_only_queue;
    }
    for (double v : rates) total += v;
    const double dt = rng.exponential(total);
    observe(dt, std::as_const(js));

    double target = rng.uniform() * total;
    std::size_t pick = rates.size();
    for (std::size_t k = 0; k < rates.size(); ++k) {
      if (rates[k] <= 0.0) continue;
      pick = k;
      if (target < rates[k]) break;
      target -= rates[k];
    }
    const int cls = static_cast<int>(pick / 6);
    switch (pick % 6) {
      case 0:
        js.primary.arrive(cls);
        ++js.matched_queue[cls];  // provisional; rematch places the pair
        break;
      case 1:
        js.primary.depart(cls, DepartureSource::Service);
        --js.matched_service[cls];
        break;
      case 2:
        apply_event(js.primary, {EventKind::Abandonment, cls}, rng);
        --js.matched_queue[cls];
        break;
      case 3:
        --js.matched_queue[cls];
        break;
      case 4:
        js.primary.depart(cls, DepartureSource::Service);
        break;
      case 5:
        apply_event(js.primary, {EventKind::Abandonment, cls}, rng);
        break;
    }
    const bool matched = rematch(js);
    const auto& m = js.primary.macro();
    for (std::size_t i = 0; i < d; ++i) {
      if (js.g(i) > m.z[i] || js.g(i) < 0 || !matched) {
        report.record(n, "G[" + std::to_string(i) + "]=" + std::to_string(js.g(i)) + " > Z[" + std::to_string(i) +
                             "]=" + std::to_string(m.z[i]));
        if (opts.fail_fast) throw Error(Errc::OrderingViolation, report.first_violation);
        break;
      }
    }
    ++report.events;
  }
  return report;
}

inline CouplingReport run_infserver_coupled(const SystemConfig& cfg, PolicyKind kind, const CouplingOptions& opts,
                                            RngStream& rng) {
  return run_infserver_coupled(cfg, kind, opts, rng, [](double, const InfServerJointState&) {});
}

// ---------------------------------------------------------------------------
// Monotone comparison in the abandonment rates

/// Probability that the shadow keeps its customer when the primary loses a
/// class customer; the nu factor is cancelled so nu = 0 is well defined.
inline double monotone_thinning_probability(int queued, int in_service, double nu, double nu_prime, double mu) {
  if (nu_prime > nu) throw Error(Errc::InvalidArgument, "nu' must not exceed nu");
  const double departure = nu * queued + mu * in_service;
  if (!(departure > 0.0)) throw Error(Errc::DegenerateState, "no departure possible (nu*Q + mu*Psi = 0)");
  return queued * (nu - nu_prime) / departure;
}

struct MonotoneJointState {
  PolicyState primary;
  Counts z_shadow;
  Counts psi_shadow;

  int q_shadow(std::size_t i) const { return z_shadow[i] - psi_shadow[i]; }
};

/// Shadow servers: every primary in-service customer is mirrored, remaining
/// servers go to extra shadow customers by ascending class index.
inline Counts shadow_allocation(const MacroState& primary, const Counts& z_shadow, int n_servers) {
  Counts psi = primary.psi;
  int remaining = n_servers - primary.busy();
  for (std::size_t i = 0; i < psi.size() && remaining > 0; ++i) {
    const int extra = std::min(z_shadow[i] - psi[i], remaining);
    if (extra > 0) {
      psi[i] += extra;
      remaining -= extra;
    }
  }
  return psi;
}

inline void require_nu_prime(const SystemConfig& cfg, const std::vector<double>& nu_prime) {
  if (nu_prime.size() != cfg.num_classes()) throw Error(Errc::InvalidArgument, "nu' has wrong length");
  for (std::size_t i = 0; i < nu_prime.size(); ++i)
    if (!(nu_prime[i] >= 0.0) || nu_prime[i] > cfg.cls(i).nu)
      throw Error(Errc::InvalidArgument, "need 0 <= nu'[" + std::to_string(i) + "] <= nu");
}

/// Shadow-only departure rate of class i: nu'(Q' - Q) + mu(Psi' - Psi).
inline double shadow_only_rate(const MonotoneJointState& js, const SystemConfig& cfg,
                               const std::vector<double>& nu_prime, std::size_t i) {
  const auto& m = js.primary.macro();
  return nu_prime[i] * (js.q_shadow(i) - m.q(i)) + cfg.cls(i).mu * (js.psi_shadow[i] - m.psi[i]);
}

template <class Observer>
CouplingReport run_monotone_coupled(const SystemConfig& cfg, const std::vector<double>& nu_prime, PolicyKind kind,
                                    const CouplingOptions& opts, RngStream& rng, Observer&& observe) {
  require_nu_prime(cfg, nu_prime);
  const std::size_t d = cfg.num_classes();
  const int n_servers = cfg.n_servers();
  MonotoneJointState js{init_state(cfg, kind), Counts(d, 0), Counts(d, 0)};
  CouplingReport report;
  std::vector<double> shadow_rates(d);
  auto fail = [&](std::uint64_t n, const std::string& what) {
    report.record(n, what);
    if (opts.fail_fast) throw Error(Errc::OrderingViolation, report.first_violation);
  };

  for (std::uint64_t n = 0; n < opts.n_events; ++n) {
    const MacroState& m = js.primary.macro();
    const double primary_rate = total_rate(m, cfg);
    double total = primary_rate;
    for (std::size_t i = 0; i < d; ++i) {
      shadow_rates[i] = shadow_only_rate(js, cfg, nu_prime, i);
      if (shadow_rates[i] < 0.0) fail(n, "negative shadow-only rate for class " + std::to_string(i));
      total += std::max(shadow_rates[i], 0.0);
    }
    const double dt = rng.exponential(total);
    observe(dt, std::as_const(js));

    double target = rng.uniform() * total;
    if (target < primary_rate) {
      const Event e = select_event(m, cfg, target);
      if (e.kind == EventKind::Arrival) {
        apply_event(js.primary, e, rng);
        ++js.z_shadow[e.cls];
      } else {
        const auto& c = cfg.cls(e.cls);
        const double keep = monotone_thinning_probability(m.q(e.cls), m.psi[e.cls], c.nu, nu_prime[e.cls], c.mu);
        apply_event(js.primary, e, rng);
        if (!rng.bernoulli(keep)) --js.z_shadow[e.cls];
      }
    } else {
      target -= primary_rate;
      std::size_t cls = d;
      for (std::size_t i = 0; i < d; ++i) {
        if (shadow_rates[i] <= 0.0) continue;
        cls = i;
        if (target < shadow_rates[i]) break;
        target -= shadow_rates[i];
      }
      if (cls < d) --js.z_shadow[cls];
    }

    const MacroState& after = js.primary.macro();
    js.psi_shadow = shadow_allocation(after, js.z_shadow, n_servers);
    if (after.busy() < n_servers && after.queued() != 0) fail(n, "primary idles a server while customers wait");
    long shadow_total = 0;
    long shadow_busy = 0;
    for (std::size_t i = 0; i < d; ++i) {
      shadow_total += js.z_shadow[i];
      shadow_busy += js.psi_shadow[i];
      if (after.z[i] > js.z_shadow[i]) {
        fail(n, "Z[" + std::to_string(i) + "]=" + std::to_string(after.z[i]) + " > Z'=" + std::to_string(js.z_shadow[i]));
        break;
      }
      if (after.psi[i] > js.psi_shadow[i] || after.q(i) > js.q_shadow(i)) {
        fail(n, "Psi/Q ordering broken for class " + std::to_string(i));
        break;
      }
    }
    if (shadow_busy != std::min<long>(n_servers, shadow_total)) fail(n, "shadow allocation is idling");
    ++report.events;
  }
  return report;
}

inline CouplingReport run_monotone_coupled(const SystemConfig& cfg, const std::vector<double>& nu_prime,
                                           PolicyKind kind, const CouplingOptions& opts, RngStream& rng) {
  return run_monotone_coupled(cfg, nu_prime, kind, opts, rng, [](double, const MonotoneJointState&) {});
}

}  // namespace hwq
