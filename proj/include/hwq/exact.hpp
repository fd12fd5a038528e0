#pragma once

// Truncated generators of the priority policies, stationary solvers and the
// operator  (A F)(x) = sum_y rate(x, y) (F(y) - F(x)).

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include "hwq/error.hpp"
#include "hwq/model.hpp"
#include "hwq/policy.hpp"
#include "hwq/poisson.hpp"
#include "hwq/simulate.hpp"

namespace hwq {

struct KeyHash {
  std::size_t operator()(const std::vector<int>& v) const noexcept {
    std::uint64_t h = 0x243F6A8885A308D3ULL;
    for (int x : v) h = splitmix64(h ^ static_cast<std::uint32_t>(x));
    return static_cast<std::size_t>(h);
  }
};

/// Visits every positive-rate transition of the untruncated chain out of `s`.
template <class Visit>
void for_each_transition(const PolicyState& s, const SystemConfig& cfg, Visit&& visit) {
  const MacroState& m = s.macro();
  for (int i = 0; i < static_cast<int>(cfg.num_classes()); ++i) {
    for (auto kind : {EventKind::Arrival, EventKind::ServiceCompletion, EventKind::Abandonment}) {
      const Event e{kind, i};
      const double rate = event_rate(m, cfg, e);
      if (rate <= 0.0) continue;
      PolicyState next = s;
      if (kind == EventKind::Arrival) next.arrive(i);
      else next.depart(i, source_of(kind));
      visit(e, rate, next);
    }
  }
}

/// Bijection between the detailed states with sum(Z) <= K and 0..n-1,
/// ordered by level sum(Z) so that generator bandwidth stays small.
class StateIndex {
 public:
  PolicyKind kind() const noexcept { return kind_; }
  int truncation() const noexcept { return truncation_; }
  int n_servers() const noexcept { return n_servers_; }
  std::size_t size() const noexcept { return macros_.size(); }
  const MacroState& macro(std::size_t i) const { return macros_[i]; }

  std::optional<std::size_t> find(const std::vector<int>& key) const {
    auto it = lookup_.find(key);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  PolicyState policy_state(std::size_t i) const {
    return kind_ == PolicyKind::PreemptivePriority ? PolicyState::from_counts(n_servers_, macros_[i].z)
                                                   : PolicyState::from_macro(n_servers_, macros_[i]);
  }

  friend StateIndex enumerate_states(std::size_t classes, int n_servers, PolicyKind kind, int truncation);

 private:
  void add(const PolicyState& s) {
    lookup_.emplace(s.key(), macros_.size());
    macros_.push_back(s.macro());
  }

  PolicyKind kind_ = PolicyKind::PreemptivePriority;
  int truncation_ = 0;
  int n_servers_ = 0;
  std::vector<MacroState> macros_;
  std::unordered_map<std::vector<int>, std::size_t, KeyHash> lookup_;
};

namespace detail {

// Calls visit(z) for every z in Z_+^d with sum(z) == level, in lexicographic order.
template <class Visit>
void compositions(std::size_t d, int level, Visit&& visit) {
  Counts z(d, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t pos, int left) {
    if (pos + 1 == d) {
      z[pos] = left;
      visit(z);
      return;
    }
    for (int v = left; v >= 0; --v) {
      z[pos] = v;
      rec(pos + 1, left - v);
    }
  };
  rec(0, level);
}

// Every psi <= z with sum(psi) == busy.
template <class Visit>
void allocations(const Counts& z, int busy, Visit&& visit) {
  const std::size_t d = z.size();
  Counts psi(d, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t pos, int left) {
    if (pos + 1 == d) {
      if (left <= z[pos]) {
        psi[pos] = left;
        visit(psi);
      }
      return;
    }
    for (int v = std::min(left, z[pos]); v >= 0; --v) {
      psi[pos] = v;
      rec(pos + 1, left - v);
    }
  };
  rec(0, busy);
}

}  // namespace detail

inline StateIndex enumerate_states(std::size_t classes, int n_servers, PolicyKind kind, int truncation) {
  if (kind == PolicyKind::Fifo) throw Error(Errc::Unsupported, "exact solution is not available for FIFO");
  if (truncation < n_servers)
    throw Error(Errc::TruncationTooSmall,
                "K=" + std::to_string(truncation) + " is below N=" + std::to_string(n_servers));
  StateIndex idx;
  idx.kind_ = kind;
  idx.truncation_ = truncation;
  idx.n_servers_ = n_servers;
  for (int level = 0; level <= truncation; ++level) {
    detail::compositions(classes, level, [&](const Counts& z) {
      if (kind == PolicyKind::PreemptivePriority) {
        idx.add(PolicyState::from_counts(n_servers, z));
      } else {
        detail::allocations(z, std::min(level, n_servers), [&](const Counts& psi) {
          idx.add(PolicyState::from_macro(n_servers, MacroState(z, psi)));
        });
      }
    });
  }
  return idx;
}

inline StateIndex enumerate_states(const SystemConfig& cfg, PolicyKind kind, int truncation) {
  return enumerate_states(cfg.num_classes(), cfg.n_servers(), kind, truncation);
}

/// Default truncation level ceil(r + 12 sqrt(r)) + N.
inline int default_truncation(const SystemConfig& cfg) {
  return static_cast<int>(std::ceil(cfg.r() + 12.0 * cfg.sqrt_r())) + cfg.n_servers();
}

/// Generator in compressed-row form. Arrivals out of the top level are
/// dropped and their rows flagged as boundary rows.
struct SparseGenerator {
  std::size_t n = 0;
  std::vector<std::size_t> row_ptr;
  std::vector<std::size_t> col;
  std::vector<double> rate;
  std::vector<double> diag;
  std::vector<char> boundary;
  std::vector<double> dropped_rate;

  double max_exit_rate() const {
    double m = 0.0;
    for (double v : diag) m = std::max(m, -v);
    return m;
  }
  std::size_t bandwidth() const {
    std::size_t b = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = row_ptr[i]; k < row_ptr[i + 1]; ++k) b = std::max(b, col[k] > i ? col[k] - i : i - col[k]);
    return b;
  }
};

inline SparseGenerator build_generator(const StateIndex& idx, const SystemConfig& cfg) {
  SparseGenerator g;
  g.n = idx.size();
  g.row_ptr.reserve(g.n + 1);
  g.row_ptr.push_back(0);
  g.diag.assign(g.n, 0.0);
  g.boundary.assign(g.n, 0);
  g.dropped_rate.assign(g.n, 0.0);
  for (std::size_t i = 0; i < g.n; ++i) {
    double out = 0.0;
    for_each_transition(idx.policy_state(i), cfg, [&](Event, double rate, const PolicyState& next) {
      if (auto j = idx.find(next.key())) {
        g.col.push_back(*j);
        g.rate.push_back(rate);
        out += rate;
      } else {
        g.boundary[i] = 1;
        g.dropped_rate[i] += rate;
      }
    });
    g.diag[i] = -out;
    g.row_ptr.push_back(g.col.size());
  }
  return g;
}

struct StationaryVector {
  std::vector<double> pi;
  double residual = 0.0;       // max_j |(pi Q)_j|
  double boundary_mass = 0.0;  // stationary mass on boundary rows
  double truncation_deficit = 0.0;
};

enum class SolverMethod { Auto, Gth, PowerIteration };

inline constexpr std::size_t kGthMaxStates = 20000;

inline double generator_residual(const SparseGenerator& g, const std::vector<double>& pi) {
  std::vector<double> flow(g.n, 0.0);
  for (std::size_t i = 0; i < g.n; ++i) {
    flow[i] += pi[i] * g.diag[i];
    for (std::size_t k = g.row_ptr[i]; k < g.row_ptr[i + 1]; ++k) flow[g.col[k]] += pi[i] * g.rate[k];
  }
  double m = 0.0;
  for (double v : flow) m = std::max(m, std::abs(v));
  return m;
}

namespace detail {

// Grassmann-Taylor-Heyman elimination on a band of half-width b.
inline std::vector<double> gth_banded(const SparseGenerator& g) {
  const std::size_t n = g.n;
  if (n == 1) return {1.0};
  const std::size_t b = std::max<std::size_t>(g.bandwidth(), 1);
  const std::size_t width = 2 * b + 1;
  std::vector<double> band(n * width, 0.0);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return band[i * width + (j + b - i)]; };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = g.row_ptr[i]; k < g.row_ptr[i + 1]; ++k)
      if (g.col[k] != i) at(i, g.col[k]) += g.rate[k];

  std::vector<double> scale(n, 0.0);
  for (std::size_t k = n - 1; k >= 1; --k) {
    const std::size_t lo = k > b ? k - b : 0;
    double s = 0.0;
    for (std::size_t j = lo; j < k; ++j) s += at(k, j);
    if (!(s > 0.0)) throw Error(Errc::Reducible, "state " + std::to_string(k) + " cannot reach lower-indexed states");
    scale[k] = s;
    for (std::size_t i = lo; i < k; ++i) {
      const double f = at(i, k);
      if (f == 0.0) continue;
      const double ratio = f / s;
      for (std::size_t j = lo; j < k; ++j)
        if (j != i) at(i, j) += ratio * at(k, j);
    }
  }
  std::vector<double> pi(n, 0.0);
  pi[0] = 1.0;
  double total = 1.0;
  for (std::size_t k = 1; k < n; ++k) {
    const std::size_t lo = k > b ? k - b : 0;
    double acc = 0.0;
    for (std::size_t i = lo; i < k; ++i) acc += pi[i] * at(i, k);
    pi[k] = acc / scale[k];
    total += pi[k];
  }
  for (double& v : pi) v /= total;
  return pi;
}

inline std::vector<double> power_iteration(const SparseGenerator& g, double tol, std::size_t max_iter) {
  const std::size_t n = g.n;
  const double lambda = g.max_exit_rate() * 1.02 + 1e-300;
  std::vector<double> pi(n, 1.0 / static_cast<double>(n)), next(n);
  for (std::size_t it = 0; it < max_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) next[i] = pi[i] * (1.0 + g.diag[i] / lambda);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = g.row_ptr[i]; k < g.row_ptr[i + 1]; ++k) next[g.col[k]] += pi[i] * g.rate[k] / lambda;
    double total = 0.0;
    for (double v : next) total += v;
    for (std::size_t i = 0; i < n; ++i) pi[i] = next[i] / total;
    if (it % 50 == 49 && generator_residual(g, pi) <= tol * g.max_exit_rate()) return pi;
  }
  throw Error(Errc::NotConverged, "power iteration did not reach residual " + std::to_string(tol) + " in " +
                                      std::to_string(max_iter) + " sweeps");
}

}  // namespace detail

struct SolverOptions {
  SolverMethod method = SolverMethod::Auto;
  double tolerance = 1e-12;  // power iteration: residual relative to the max exit rate
  std::size_t max_iterations = 2'000'000;
};

inline StationaryVector stationary(const SparseGenerator& g, const SolverOptions& opts = {}) {
  if (g.n == 0) throw Error(Errc::InvalidArgument, "empty generator");
  StationaryVector out;
  const bool use_gth =
      opts.method == SolverMethod::Gth || (opts.method == SolverMethod::Auto && g.n <= kGthMaxStates);
  out.pi = use_gth ? detail::gth_banded(g) : detail::power_iteration(g, opts.tolerance, opts.max_iterations);
  out.residual = generator_residual(g, out.pi);
  for (std::size_t i = 0; i < g.n; ++i)
    if (g.boundary[i]) out.boundary_mass += out.pi[i];
  return out;
}

/// Solves a truncated instance and estimates the mass lost above level K by a
/// geometric tail whose ratio is (total arrival rate) / (minimum departure rate at level K).
inline StationaryVector stationary(const StateIndex& idx, const SparseGenerator& g, const SystemConfig& cfg,
                                   const SolverOptions& opts = {}) {
  StationaryVector out = stationary(g, opts);
  double min_departure = INFINITY;
  for (std::size_t i = 0; i < g.n; ++i)
    if (g.boundary[i]) min_departure = std::min(min_departure, -g.diag[i]);
  const double ratio = cfg.lambda_sum() * cfg.r() / min_departure;
  out.truncation_deficit = ratio < 1.0 ? out.boundary_mass * ratio / (1.0 - ratio) : out.boundary_mass;
  (void)idx;
  return out;
}

/// F evaluated at every indexed state.
inline std::vector<double> tabulate(const StateIndex& idx, const Functional& f) {
  std::vector<double> v(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) v[i] = f(idx.macro(i));
  return v;
}

/// (A F)(x_i) over the truncated generator.
inline double abar_apply(const std::vector<double>& f_values, std::size_t i, const SparseGenerator& g) {
  double acc = 0.0;
  for (std::size_t k = g.row_ptr[i]; k < g.row_ptr[i + 1]; ++k) acc += g.rate[k] * (f_values[g.col[k]] - f_values[i]);
  return acc;
}

inline double abar_apply(const Functional& f, std::size_t i, const StateIndex& idx, const SparseGenerator& g) {
  const double fx = f(idx.macro(i));
  double acc = 0.0;
  for (std::size_t k = g.row_ptr[i]; k < g.row_ptr[i + 1]; ++k) acc += g.rate[k] * (f(idx.macro(g.col[k])) - fx);
  return acc;
}

/// (A F)(x) over the untruncated chain.
inline double abar_apply(const Functional& f, const PolicyState& x, const SystemConfig& cfg) {
  const double fx = f(x.macro());
  double acc = 0.0;
  for_each_transition(x, cfg, [&](Event, double rate, const PolicyState& y) { acc += rate * (f(y.macro()) - fx); });
  return acc;
}

inline double expectation(const StationaryVector& s, const std::vector<double>& f_values) {
  double acc = 0.0;
  for (std::size_t i = 0; i < s.pi.size(); ++i) acc += s.pi[i] * f_values[i];
  return acc;
}

inline double expectation(const StationaryVector& s, const StateIndex& idx, const Functional& f) {
  return expectation(s, tabulate(idx, f));
}

struct GeneratorIdentity {
  double residual = 0.0;  // |E_pi A F| using the untruncated operator
  double deficit = 0.0;   // contribution of transitions cut off by the truncation
  // floating-point bound: states * max|(pi Q)_j| * max|F| for the inexact pi,
  // plus states * eps * sum_i pi_i sum rate (|F(y)| + |F(x)|) for the summation
  double roundoff = 0.0;
};

inline GeneratorIdentity generator_identity(const StationaryVector& s, const StateIndex& idx, const SystemConfig& cfg,
                                            const Functional& f) {
  GeneratorIdentity out;
  double sum = 0.0, magnitude = 0.0, f_max = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const PolicyState x = idx.policy_state(i);
    const double fx = f(x.macro());
    f_max = std::max(f_max, std::abs(fx));
    double drift = 0.0;
    double cut = 0.0;
    double mag = 0.0;
    for_each_transition(x, cfg, [&](Event, double rate, const PolicyState& y) {
      const double fy = f(y.macro());
      const double delta = rate * (fy - fx);
      drift += delta;
      mag += rate * (std::abs(fy) + std::abs(fx));
      if (!idx.find(y.key())) cut += std::abs(delta);
    });
    sum += s.pi[i] * drift;
    magnitude += s.pi[i] * mag;
    out.deficit += s.pi[i] * cut;
  }
  const double n = static_cast<double>(idx.size());
  out.residual = std::abs(sum);
  out.roundoff = n * s.residual * f_max + n * std::numeric_limits<double>::epsilon() * magnitude;
  return out;
}

/// Convenience bundle: enumerate, build and solve.
struct ExactSolution {
  StateIndex index;
  SparseGenerator generator;
  StationaryVector stationary;

  double expect(const Functional& f) const { return expectation(stationary, index, f); }
};

inline ExactSolution solve_exact(const SystemConfig& cfg, PolicyKind kind, std::optional<int> truncation = {},
                                 const SolverOptions& opts = {}) {
  ExactSolution sol{enumerate_states(cfg, kind, truncation.value_or(default_truncation(cfg))), {}, {}};
  sol.generator = build_generator(sol.index, cfg);
  sol.stationary = stationary(sol.index, sol.generator, cfg, opts);
  return sol;
}

/// Number of detailed states solve_exact would enumerate, without building them.
inline std::uint64_t count_states(const SystemConfig& cfg, PolicyKind kind, int truncation) {
  if (kind == PolicyKind::Fifo) return 0;
  std::uint64_t total = 0;
  const std::size_t d = cfg.num_classes();
  for (int level = 0; level <= truncation; ++level) {
    if (kind == PolicyKind::PreemptivePriority) {
      // C(level + d - 1, d - 1)
      double c = 1.0;
      for (std::size_t k = 1; k < d; ++k) c = c * static_cast<double>(level + k) / static_cast<double>(k);
      total += static_cast<std::uint64_t>(std::llround(c));
    } else {
      detail::compositions(d, level, [&](const Counts& z) {
        detail::allocations(z, std::min(level, cfg.n_servers()), [&](const Counts&) { ++total; });
      });
    }
  }
  return total;
}

}  // namespace hwq
