#pragma once

// Test functions of the macro state used by the drift checks and sweeps.
// Each factory captures the scaling constants it needs, not the whole config.

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "hwq/error.hpp"
#include "hwq/model.hpp"
#include "hwq/simulate.hpp"

namespace hwq::functionals {

namespace detail {

struct Scaling {
  std::vector<double> center;  // rho_i r
  std::vector<double> inv_mu;
  double inv_sqrt_r = 1.0;

  explicit Scaling(const SystemConfig& cfg) : center(cfg.num_classes()), inv_mu(cfg.num_classes()) {
    for (std::size_t i = 0; i < cfg.num_classes(); ++i) {
      center[i] = cfg.rho(i) * cfg.r();
      inv_mu[i] = 1.0 / cfg.cls(i).mu;
    }
    inv_sqrt_r = 1.0 / cfg.sqrt_r();
  }

  double z_hat(const MacroState& s, std::size_t i) const { return (s.z[i] - center[i]) * inv_sqrt_r; }

  double phi_hat(const MacroState& s) const {
    double v = 0.0;
    for (std::size_t i = 0; i < center.size(); ++i) v += z_hat(s, i) * inv_mu[i];
    return v;
  }
  double z_hat_total(const MacroState& s) const {
    double v = 0.0;
    for (std::size_t i = 0; i < center.size(); ++i) v += z_hat(s, i);
    return v;
  }
  double pos_sum(const MacroState& s) const {
    double v = 0.0;
    for (std::size_t i = 0; i < center.size(); ++i) v += std::max(z_hat(s, i), 0.0);
    return v;
  }
  double neg_sum(const MacroState& s) const {
    double v = 0.0;
    for (std::size_t i = 0; i < center.size(); ++i) v += std::max(-z_hat(s, i), 0.0);
    return v;
  }
};

}  // namespace detail

inline Functional constant(double c) {
  return [c](const MacroState&) { return c; };
}

inline Functional total_count() {
  return [](const MacroState& s) { return static_cast<double>(s.total()); };
}

inline Functional class_count(std::size_t i) {
  return [i](const MacroState& s) { return static_cast<double>(s.z[i]); };
}

inline Functional busy_servers() {
  return [](const MacroState& s) { return static_cast<double>(s.busy()); };
}

inline Functional phi_hat(const SystemConfig& cfg) {
  return [sc = detail::Scaling(cfg)](const MacroState& s) { return sc.phi_hat(s); };
}

inline Functional z_hat_total(const SystemConfig& cfg) {
  return [sc = detail::Scaling(cfg)](const MacroState& s) { return sc.z_hat_total(s); };
}

/// exp(theta * sum_i Zhat_i^+)
inline Functional mgf_pos(const SystemConfig& cfg, double theta) {
  return [sc = detail::Scaling(cfg), theta](const MacroState& s) { return std::exp(theta * sc.pos_sum(s)); };
}

/// exp(theta * sum_i Zhat_i^-)
inline Functional mgf_neg(const SystemConfig& cfg, double theta) {
  return [sc = detail::Scaling(cfg), theta](const MacroState& s) { return std::exp(theta * sc.neg_sum(s)); };
}

/// exp(theta * (Zhat^+)^2) * 1{Phihat <= k}
inline Functional trunc_square_mgf(const SystemConfig& cfg, double theta, double k) {
  return [sc = detail::Scaling(cfg), theta, k](const MacroState& s) {
    if (sc.phi_hat(s) > k) return 0.0;
    const double zp = std::max(sc.z_hat_total(s), 0.0);
    return std::exp(theta * zp * zp);
  };
}

/// 1{Qhat >= x}
inline Functional queue_tail(const SystemConfig& cfg, double x) {
  const double scaled = x * cfg.sqrt_r();
  return [scaled](const MacroState& s) { return s.queued() >= scaled ? 1.0 : 0.0; };
}

/// 1{Zhat^+ >= x}
inline Functional z_pos_tail(const SystemConfig& cfg, double x) {
  return [sc = detail::Scaling(cfg), x](const MacroState& s) { return std::max(sc.z_hat_total(s), 0.0) >= x ? 1.0 : 0.0; };
}

/// exp(theta * min(Phihat, k))
inline Functional exp_phi_truncated(const SystemConfig& cfg, double theta, double k) {
  return [sc = detail::Scaling(cfg), theta, k](const MacroState& s) { return std::exp(theta * std::min(sc.phi_hat(s), k)); };
}

/// exp(-theta * Phihat)
inline Functional exp_neg_phi(const SystemConfig& cfg, double theta) {
  return [sc = detail::Scaling(cfg), theta](const MacroState& s) { return std::exp(-theta * sc.phi_hat(s)); };
}

/// exp(theta * min(Phihat, k)^2)
inline Functional exp_phi_truncated_square(const SystemConfig& cfg, double theta, double k) {
  return [sc = detail::Scaling(cfg), theta, k](const MacroState& s) {
    const double v = std::min(sc.phi_hat(s), k);
    return std::exp(theta * v * v);
  };
}

/// Identifiers accepted by sweeps and the CLI.
enum class SweepFunctional { MgfPos, MgfNeg, TruncSquareMgf, QueueTail };

inline constexpr std::string_view to_string(SweepFunctional f) noexcept {
  switch (f) {
    case SweepFunctional::MgfPos: return "mgf_pos";
    case SweepFunctional::MgfNeg: return "mgf_neg";
    case SweepFunctional::TruncSquareMgf: return "trunc_sq_mgf";
    case SweepFunctional::QueueTail: return "queue_tail";
  }
  return "unknown";
}

inline SweepFunctional parse_sweep_functional(std::string_view s) {
  for (auto f : {SweepFunctional::MgfPos, SweepFunctional::MgfNeg, SweepFunctional::TruncSquareMgf,
                 SweepFunctional::QueueTail})
    if (s == to_string(f)) return f;
  throw Error(Errc::SchemaError,
              "unknown functional '" + std::string(s) + "' (valid: mgf_pos, mgf_neg, trunc_sq_mgf, queue_tail)");
}

/// `param` is theta for the MGFs and x for queue_tail.
inline Functional make(SweepFunctional id, const SystemConfig& cfg, double param, double k) {
  switch (id) {
    case SweepFunctional::MgfPos: return mgf_pos(cfg, param);
    case SweepFunctional::MgfNeg: return mgf_neg(cfg, param);
    case SweepFunctional::TruncSquareMgf: return trunc_square_mgf(cfg, param, k);
    case SweepFunctional::QueueTail: return queue_tail(cfg, param);
  }
  throw Error(Errc::InvalidArgument, "unknown functional");
}

}  // namespace hwq::functionals
