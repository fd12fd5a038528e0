#pragma once

// Exact jump simulation: draw the holding time from the total event rate,
// then the event category in proportion to its rate.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string_view>
#include <thread>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "hwq/error.hpp"
#include "hwq/model.hpp"
#include "hwq/policy.hpp"
#include "hwq/rng.hpp"

namespace hwq {

using Functional = std::function<double(const MacroState&)>;

inline double total_rate(const MacroState& s, const SystemConfig& cfg) {
  double rate = 0.0;
  for (std::size_t i = 0; i < cfg.num_classes(); ++i) {
    const auto& c = cfg.cls(i);
    rate += c.lambda * cfg.r() + c.mu * s.psi[i] + c.nu * s.q(i);
  }
  return rate;
}

/// Rate of a specific event at a macro state.
inline double event_rate(const MacroState& s, const SystemConfig& cfg, Event e) {
  const auto& c = cfg.cls(e.cls);
  switch (e.kind) {
    case EventKind::Arrival: return c.lambda * cfg.r();
    case EventKind::ServiceCompletion: return c.mu * s.psi[e.cls];
    case EventKind::Abandonment: return c.nu * s.q(e.cls);
  }
  return 0.0;
}

/// Picks the event whose cumulative-rate bucket contains `target` in [0, total).
inline Event select_event(const MacroState& s, const SystemConfig& cfg, double target) {
  const int d = static_cast<int>(cfg.num_classes());
  Event last{EventKind::Arrival, d - 1};
  for (auto kind : {EventKind::Arrival, EventKind::ServiceCompletion, EventKind::Abandonment}) {
    for (int i = 0; i < d; ++i) {
      const double rate = event_rate(s, cfg, {kind, i});
      if (rate <= 0.0) continue;
      last = {kind, i};
      if (target < rate) return last;
      target -= rate;
    }
  }
  return last;  // floating-point spill past the last bucket
}

inline DepartureSource source_of(EventKind k) {
  return k == EventKind::ServiceCompletion ? DepartureSource::Service : DepartureSource::Queue;
}

/// Applies an event to a policy state; FIFO abandonments consume one extra uniform.
inline void apply_event(PolicyState& s, Event e, RngStream& rng) {
  if (e.kind == EventKind::Arrival) {
    s.arrive(e.cls);
  } else if (e.kind == EventKind::Abandonment && s.kind() == PolicyKind::Fifo) {
    s.depart(e.cls, DepartureSource::Queue, rng.uniform());
  } else {
    s.depart(e.cls, source_of(e.kind));
  }
}

struct StepResult {
  double holding_time = 0.0;
  Event event;
};

/// Advances `state` by one jump.
inline StepResult step(PolicyState& state, const SystemConfig& cfg, RngStream& rng) {
  const double rate = total_rate(state.macro(), cfg);
  StepResult out;
  out.holding_time = rng.exponential(rate);
  out.event = select_event(state.macro(), cfg, rng.uniform() * rate);
  apply_event(state, out.event, rng);
  return out;
}

/// Cheap check of the macro invariants (no diagnostics).
inline bool macro_valid(const MacroState& s, int n_servers) {
  long total = 0;
  long busy = 0;
  for (std::size_t i = 0; i < s.z.size(); ++i) {
    if (s.psi[i] < 0 || s.psi[i] > s.z[i]) return false;
    total += s.z[i];
    busy += s.psi[i];
  }
  return busy == std::min<long>(n_servers, total);
}

/// True when exactly one class count moved by one unit in the event's direction.
inline bool unit_jump(const MacroState& before, const MacroState& after, Event e) {
  for (std::size_t i = 0; i < before.z.size(); ++i) {
    int expected = before.z[i];
    if (static_cast<int>(i) == e.cls) expected += e.kind == EventKind::Arrival ? 1 : -1;
    if (after.z[i] != expected) return false;
  }
  return true;
}

struct RunOptions {
  std::uint64_t n_events = 0;
  std::uint64_t warmup_events = 0;
  bool check_invariants = false;
};

struct RunSummary {
  std::vector<double> means;  // time averages, one per functional
  double span = 0.0;          // post-warmup time
  std::uint64_t events = 0;
  std::uint64_t invariant_violations = 0;
  MacroState final_state;
};

inline RunSummary run(const SystemConfig& cfg, PolicyKind kind, const std::vector<Functional>& functionals,
                      const RunOptions& opts, RngStream& rng) {
  if (opts.n_events <= opts.warmup_events)
    throw Error(Errc::InvalidArgument, "n_events must exceed warmup_events (empty averaging span)");
  PolicyState state = init_state(cfg, kind);
  RunSummary out;
  std::vector<double> integral(functionals.size(), 0.0);
  MacroState before;
  for (std::uint64_t n = 0; n < opts.n_events; ++n) {
    if (opts.check_invariants) before = state.macro();
    const double rate = total_rate(state.macro(), cfg);
    const double dt = rng.exponential(rate);
    if (n >= opts.warmup_events) {
      for (std::size_t f = 0; f < functionals.size(); ++f) integral[f] += functionals[f](state.macro()) * dt;
      out.span += dt;
    }
    const Event e = select_event(state.macro(), cfg, rng.uniform() * rate);
    apply_event(state, e, rng);
    if (opts.check_invariants &&
        (!macro_valid(state.macro(), cfg.n_servers()) || !unit_jump(before, state.macro(), e)))
      ++out.invariant_violations;
  }
  out.events = opts.n_events;
  out.means.resize(functionals.size());
  for (std::size_t f = 0; f < functionals.size(); ++f) out.means[f] = integral[f] / out.span;
  out.final_state = state.macro();
  return out;
}

enum class EstimatorMethod { Exact, Regenerative, BatchMeans };

constexpr std::string_view to_string(EstimatorMethod m) noexcept {
  switch (m) {
    case EstimatorMethod::Exact: return "exact";
    case EstimatorMethod::Regenerative: return "regenerative";
    case EstimatorMethod::BatchMeans: return "batch_means";
  }
  return "unknown";
}

struct StationaryEstimate {
  double value = 0.0;
  double half_width = 0.0;  // 95% confidence
  EstimatorMethod method = EstimatorMethod::BatchMeans;
  std::uint64_t cycles_or_batches = 0;
  std::uint64_t warmup_events = 0;
};

inline constexpr double kNormal975 = 1.959963984540054;

/// Ratio estimator over excursions from the empty state, one estimate per functional.
inline std::vector<StationaryEstimate> regenerative_estimate(const SystemConfig& cfg, PolicyKind kind,
                                                             const std::vector<Functional>& functionals,
                                                             std::uint64_t n_cycles, RngStream& rng,
                                                             std::uint64_t max_events_per_cycle = 1'000'000) {
  if (n_cycles < 2) throw Error(Errc::InvalidArgument, "regenerative estimation needs at least 2 cycles");
  const std::size_t nf = functionals.size();
  std::vector<std::vector<double>> y(nf, std::vector<double>(n_cycles, 0.0));
  std::vector<double> tau(n_cycles, 0.0);
  PolicyState state = init_state(cfg, kind);
  for (std::uint64_t c = 0; c < n_cycles; ++c) {
    std::uint64_t events = 0;
    do {
      if (++events > max_events_per_cycle)
        throw Error(Errc::CycleTimeout, "empty state not revisited within " + std::to_string(max_events_per_cycle) +
                                            " events (cycle " + std::to_string(c) + ")");
      const double rate = total_rate(state.macro(), cfg);
      const double dt = rng.exponential(rate);
      for (std::size_t f = 0; f < nf; ++f) y[f][c] += functionals[f](state.macro()) * dt;
      tau[c] += dt;
      apply_event(state, select_event(state.macro(), cfg, rng.uniform() * rate), rng);
    } while (state.macro().total() != 0);
  }
  double tau_sum = 0.0;
  for (double t : tau) tau_sum += t;
  const double tau_mean = tau_sum / static_cast<double>(n_cycles);
  std::vector<StationaryEstimate> out(nf);
  for (std::size_t f = 0; f < nf; ++f) {
    double y_sum = 0.0;
    for (double v : y[f]) y_sum += v;
    const double est = y_sum / tau_sum;
    double ss = 0.0;
    for (std::uint64_t c = 0; c < n_cycles; ++c) {
      const double dev = y[f][c] - est * tau[c];
      ss += dev * dev;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n_cycles - 1));
    out[f] = {est, kNormal975 * sd / (tau_mean * std::sqrt(static_cast<double>(n_cycles))),
              EstimatorMethod::Regenerative, n_cycles, 0};
  }
  return out;
}

inline StationaryEstimate regenerative_estimate(const SystemConfig& cfg, PolicyKind kind, const Functional& f,
                                                std::uint64_t n_cycles, RngStream& rng,
                                                std::uint64_t max_events_per_cycle = 1'000'000) {
  return regenerative_estimate(cfg, kind, std::vector<Functional>{f}, n_cycles, rng, max_events_per_cycle).front();
}

/// Student-t batch-means intervals over time-weighted batch averages.
inline std::vector<StationaryEstimate> batch_means_estimate(const SystemConfig& cfg, PolicyKind kind,
                                                            const std::vector<Functional>& functionals,
                                                            std::uint64_t n_batches, std::uint64_t events_per_batch,
                                                            std::uint64_t warmup, RngStream& rng) {
  if (n_batches < 10) throw Error(Errc::InvalidArgument, "batch means needs at least 10 batches");
  if (events_per_batch == 0) throw Error(Errc::InvalidArgument, "events_per_batch must be positive");
  const std::size_t nf = functionals.size();
  PolicyState state = init_state(cfg, kind);
  for (std::uint64_t n = 0; n < warmup; ++n) step(state, cfg, rng);

  std::vector<std::vector<double>> batch_mean(nf, std::vector<double>(n_batches));
  std::vector<double> total_integral(nf, 0.0);
  double total_time = 0.0;
  std::vector<double> integral(nf);
  for (std::uint64_t b = 0; b < n_batches; ++b) {
    std::fill(integral.begin(), integral.end(), 0.0);
    double span = 0.0;
    for (std::uint64_t n = 0; n < events_per_batch; ++n) {
      const double rate = total_rate(state.macro(), cfg);
      const double dt = rng.exponential(rate);
      for (std::size_t f = 0; f < nf; ++f) integral[f] += functionals[f](state.macro()) * dt;
      span += dt;
      apply_event(state, select_event(state.macro(), cfg, rng.uniform() * rate), rng);
    }
    for (std::size_t f = 0; f < nf; ++f) {
      batch_mean[f][b] = integral[f] / span;
      total_integral[f] += integral[f];
    }
    total_time += span;
  }
  const boost::math::students_t dist(static_cast<double>(n_batches - 1));
  const double t_quant = boost::math::quantile(boost::math::complement(dist, 0.025));
  std::vector<StationaryEstimate> out(nf);
  for (std::size_t f = 0; f < nf; ++f) {
    double mean = 0.0;
    for (double m : batch_mean[f]) mean += m;
    mean /= static_cast<double>(n_batches);
    double ss = 0.0;
    for (double m : batch_mean[f]) ss += (m - mean) * (m - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n_batches - 1));
    out[f] = {total_integral[f] / total_time, t_quant * sd / std::sqrt(static_cast<double>(n_batches)),
              EstimatorMethod::BatchMeans, n_batches, warmup};
  }
  return out;
}

inline StationaryEstimate batch_means_estimate(const SystemConfig& cfg, PolicyKind kind, const Functional& f,
                                               std::uint64_t n_batches, std::uint64_t events_per_batch,
                                               std::uint64_t warmup, RngStream& rng) {
  return batch_means_estimate(cfg, kind, std::vector<Functional>{f}, n_batches, events_per_batch, warmup, rng)
      .front();
}

/// Default warmup: ten events per server.
inline std::uint64_t default_warmup(const SystemConfig& cfg) { return 10ULL * static_cast<std::uint64_t>(cfg.n_servers()); }

/// Runs `task(i)` for i in [0, n) on up to `threads` workers. Results are
/// stored by index, so the merged output does not depend on scheduling.
template <class Task>
auto parallel_map(std::size_t n, unsigned threads, Task task) -> std::vector<decltype(task(std::size_t{}))> {
  std::vector<decltype(task(std::size_t{}))> out(n);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = task(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          out[i] = task(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace hwq
