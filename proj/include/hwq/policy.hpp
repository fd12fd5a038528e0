#pragma once

// Detailed Markov states for three non-idling disciplines. Class indices are
// 0-based; a larger index means a higher priority.

#include <algorithm>
#include <cstddef>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

#include "hwq/error.hpp"
#include "hwq/model.hpp"

namespace hwq {

enum class PolicyKind { PreemptivePriority, NonPreemptivePriority, Fifo };

constexpr std::string_view to_string(PolicyKind k) noexcept {
  switch (k) {
    case PolicyKind::PreemptivePriority: return "preemptive_priority";
    case PolicyKind::NonPreemptivePriority: return "nonpreemptive_priority";
    case PolicyKind::Fifo: return "fifo";
  }
  return "unknown";
}

inline PolicyKind parse_policy_kind(std::string_view s) {
  if (s == "preemptive_priority") return PolicyKind::PreemptivePriority;
  if (s == "nonpreemptive_priority") return PolicyKind::NonPreemptivePriority;
  if (s == "fifo") return PolicyKind::Fifo;
  throw Error(Errc::SchemaError, "unknown policy '" + std::string(s) +
                                     "' (valid: preemptive_priority, nonpreemptive_priority, fifo)");
}

enum class EventKind { Arrival, ServiceCompletion, Abandonment };
enum class DepartureSource { Service, Queue };

struct Event {
  EventKind kind = EventKind::Arrival;
  int cls = 0;
  bool operator==(const Event&) const = default;
};

/// A policy's Markov state. The macro projection (Z, Psi) is maintained
/// incrementally. For FIFO the waiting line keeps arrival order; customers in
/// service are kept as per-class counts since their relative order never
/// influences future transitions.
class PolicyState {
 public:
  PolicyState(PolicyKind kind, std::size_t classes, int n_servers)
      : kind_(kind), n_servers_(n_servers), macro_(classes) {}

  /// FIFO state from a full arrival-order sequence of class labels.
  static PolicyState from_fifo_sequence(std::size_t classes, int n_servers, const std::vector<int>& sequence) {
    PolicyState s(PolicyKind::Fifo, classes, n_servers);
    for (int c : sequence) s.arrive(c);
    return s;
  }
  static PolicyState from_fifo_sequence(const SystemConfig& cfg, const std::vector<int>& sequence) {
    return from_fifo_sequence(cfg.num_classes(), cfg.n_servers(), sequence);
  }

  /// Preemptive-priority state; Psi follows from Z.
  static PolicyState from_counts(int n_servers, Counts z) {
    PolicyState s(PolicyKind::PreemptivePriority, z.size(), n_servers);
    s.macro_.z = std::move(z);
    s.allocate_preemptive();
    return s;
  }
  static PolicyState from_counts(const SystemConfig& cfg, Counts z) { return from_counts(cfg.n_servers(), std::move(z)); }

  /// Non-preemptive state from an explicit (Z, Psi) pair satisfying the macro invariants.
  static PolicyState from_macro(int n_servers, MacroState m) {
    int total = 0;
    for (std::size_t i = 0; i < m.z.size(); ++i) {
      if (m.psi.size() != m.z.size() || m.psi[i] < 0 || m.psi[i] > m.z[i])
        throw Error(Errc::InvalidArgument, "Psi must satisfy 0 <= Psi <= Z");
      total += m.z[i];
    }
    if (m.busy() != std::min(n_servers, total)) throw Error(Errc::InvalidArgument, "allocation is not non-idling");
    PolicyState s(PolicyKind::NonPreemptivePriority, m.z.size(), n_servers);
    s.macro_ = std::move(m);
    s.busy_ = s.macro_.busy();
    return s;
  }
  static PolicyState from_macro(const SystemConfig& cfg, MacroState m) { return from_macro(cfg.n_servers(), std::move(m)); }

  PolicyKind kind() const noexcept { return kind_; }
  int n_servers() const noexcept { return n_servers_; }
  std::size_t num_classes() const noexcept { return macro_.z.size(); }
  const MacroState& macro() const noexcept { return macro_; }
  const std::deque<int>& waiting_line() const noexcept { return waiting_; }

  /// Integer key identifying the detailed state (Z for preemptive, Z then Psi otherwise).
  std::vector<int> key() const {
    std::vector<int> k = macro_.z;
    if (kind_ == PolicyKind::PreemptivePriority) return k;
    k.insert(k.end(), macro_.psi.begin(), macro_.psi.end());
    if (kind_ == PolicyKind::Fifo) k.insert(k.end(), waiting_.begin(), waiting_.end());
    return k;
  }

  void arrive(int cls) {
    check_class(cls);
    ++macro_.z[cls];
    switch (kind_) {
      case PolicyKind::PreemptivePriority:
        allocate_preemptive();
        break;
      case PolicyKind::NonPreemptivePriority:
        if (busy_ < n_servers_) take_server(cls);
        break;
      case PolicyKind::Fifo:
        if (busy_ < n_servers_) take_server(cls);
        else waiting_.push_back(cls);
        break;
    }
  }

  /// Removes one class-`cls` customer. `pick` in [0,1) selects which queued
  /// customer abandons under FIFO (uniform over queued customers of the class).
  void depart(int cls, DepartureSource source, double pick = 0.0) {
    check_class(cls);
    if (source == DepartureSource::Service) {
      if (macro_.psi[cls] < 1) throw Error(Errc::EmptySource, "no class " + std::to_string(cls) + " customer in service");
    } else if (macro_.q(cls) < 1) {
      throw Error(Errc::EmptySource, "no class " + std::to_string(cls) + " customer in queue");
    }
    --macro_.z[cls];
    switch (kind_) {
      case PolicyKind::PreemptivePriority:
        allocate_preemptive();
        break;
      case PolicyKind::NonPreemptivePriority:
        if (source == DepartureSource::Service) {
          release_server(cls);
          for (int j = static_cast<int>(num_classes()) - 1; j >= 0; --j) {
            if (macro_.q(j) > 0) {
              take_server(j);
              break;
            }
          }
        }
        break;
      case PolicyKind::Fifo:
        if (source == DepartureSource::Service) {
          release_server(cls);
          if (!waiting_.empty()) {
            take_server(waiting_.front());
            waiting_.pop_front();
          }
        } else {
          remove_waiting(cls, pick);
        }
        break;
    }
  }

  bool operator==(const PolicyState&) const = default;

 private:
  void check_class(int cls) const {
    if (cls < 0 || static_cast<std::size_t>(cls) >= num_classes())
      throw Error(Errc::InvalidArgument, "class index " + std::to_string(cls) + " out of range");
  }

  void take_server(int cls) {
    ++macro_.psi[cls];
    ++busy_;
  }
  void release_server(int cls) {
    --macro_.psi[cls];
    --busy_;
  }

  // Highest class first; a lower class loses servers when a higher one needs them.
  void allocate_preemptive() {
    int remaining = n_servers_;
    for (std::size_t j = num_classes(); j-- > 0;) {
      macro_.psi[j] = std::min(macro_.z[j], remaining);
      remaining -= macro_.psi[j];
    }
    busy_ = n_servers_ - remaining;
  }

  void remove_waiting(int cls, double pick) {
    // macro_.z was already decremented, so q(cls) + 1 customers of the class wait.
    const int count = macro_.q(cls) + 1;
    int target = std::min(static_cast<int>(pick * count), count - 1);
    for (auto it = waiting_.begin(); it != waiting_.end(); ++it) {
      if (*it == cls && target-- == 0) {
        waiting_.erase(it);
        return;
      }
    }
  }

  PolicyKind kind_;
  int n_servers_;
  int busy_ = 0;
  MacroState macro_;
  std::deque<int> waiting_;
};

inline PolicyState init_state(const SystemConfig& cfg, PolicyKind kind) {
  return PolicyState(kind, cfg.num_classes(), cfg.n_servers());
}

inline const MacroState& project(const PolicyState& s) { return s.macro(); }

inline PolicyState apply_arrival(PolicyState s, int cls) {
  s.arrive(cls);
  return s;
}

inline PolicyState apply_departure(PolicyState s, int cls, DepartureSource source, double pick = 0.0) {
  s.depart(cls, source, pick);
  return s;
}

/// Preemptive-priority allocation as a pure function of Z.
inline Counts preemptive_allocation(const Counts& z, int n_servers) {
  Counts psi(z.size(), 0);
  int remaining = n_servers;
  for (std::size_t j = z.size(); j-- > 0;) {
    psi[j] = std::min(z[j], remaining);
    remaining -= psi[j];
  }
  return psi;
}

}  // namespace hwq
