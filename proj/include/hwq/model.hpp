#pragma once

// Multiclass many-server system in the Halfin-Whitt regime: parameters,
// macro-state (per-class occupancy) and diffusion-scaled observables.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hwq/error.hpp"

namespace hwq {

using Counts = std::vector<int>;

struct ClassParams {
  double lambda = 1.0;  // arrival rate per unit of scale
  double mu = 1.0;      // service rate
  double nu = 0.0;      // abandonment rate of waiting customers

  bool operator==(const ClassParams&) const = default;
};

inline constexpr double kUnitLoadTolerance = 1e-9;

class SystemConfig {
 public:
  /// Validates rates, enforces sum(lambda/mu) == 1 and sets N = ceil(r + a*sqrt(r)).
  static SystemConfig build(std::vector<ClassParams> classes, double r, double a) {
    if (classes.empty()) throw Error(Errc::InvalidArgument, "at least one class is required");
    if (!(r >= 1.0) || !std::isfinite(r)) throw Error(Errc::InvalidArgument, "scale r must be >= 1");
    if (!(a > 0.0) || !std::isfinite(a)) throw Error(Errc::InvalidArgument, "spare capacity a must be > 0");
    double load = 0.0;
    for (std::size_t i = 0; i < classes.size(); ++i) {
      const auto& c = classes[i];
      if (!(c.lambda > 0.0) || !(c.mu > 0.0) || !(c.nu >= 0.0) || !std::isfinite(c.lambda) ||
          !std::isfinite(c.mu) || !std::isfinite(c.nu)) {
        std::ostringstream os;
        os << "class " << i << " has lambda=" << c.lambda << " mu=" << c.mu << " nu=" << c.nu
           << " (need lambda>0, mu>0, nu>=0)";
        throw Error(Errc::InvalidRate, os.str());
      }
      load += c.lambda / c.mu;
    }
    if (std::abs(load - 1.0) > kUnitLoadTolerance) {
      std::ostringstream os;
      os.precision(17);
      os << "sum of lambda_i/mu_i is " << load << ", must equal 1 (per-class rho:";
      for (const auto& c : classes) os << ' ' << c.lambda / c.mu;
      os << ')';
      throw Error(Errc::NonUnitLoad, os.str());
    }
    SystemConfig cfg;
    cfg.classes_ = std::move(classes);
    cfg.r_ = r;
    cfg.a_ = a;
    cfg.sqrt_r_ = std::sqrt(r);
    // Guard against r + a*sqrt(r) landing a hair above an integer.
    const double target = r + a * cfg.sqrt_r_;
    const double rounded = std::round(target);
    cfg.n_servers_ = static_cast<int>(std::abs(target - rounded) <= 1e-9 * target ? rounded : std::ceil(target));
    return cfg;
  }

  /// Same system with abandonment rates replaced; used for the monotone shadow.
  SystemConfig with_nu(const std::vector<double>& nu) const {
    if (nu.size() != classes_.size()) throw Error(Errc::InvalidArgument, "nu vector has wrong length");
    auto cls = classes_;
    for (std::size_t i = 0; i < cls.size(); ++i) cls[i].nu = nu[i];
    return build(std::move(cls), r_, a_);
  }

  const std::vector<ClassParams>& classes() const noexcept { return classes_; }
  const ClassParams& cls(std::size_t i) const { return classes_[i]; }
  std::size_t num_classes() const noexcept { return classes_.size(); }
  double r() const noexcept { return r_; }
  double a() const noexcept { return a_; }
  double sqrt_r() const noexcept { return sqrt_r_; }
  int n_servers() const noexcept { return n_servers_; }

  /// Spare capacity implied by the integer server count, (N - r)/sqrt(r) >= a.
  double effective_a() const noexcept { return (n_servers_ - r_) / sqrt_r_; }

  double rho(std::size_t i) const { return classes_[i].lambda / classes_[i].mu; }

  double mu_min() const { return reduce([](const ClassParams& c) { return c.mu; }, true); }
  double mu_max() const { return reduce([](const ClassParams& c) { return c.mu; }, false); }
  double nu_min() const { return reduce([](const ClassParams& c) { return c.nu; }, true); }
  double nu_max() const { return reduce([](const ClassParams& c) { return c.nu; }, false); }
  double lambda_sum() const {
    double s = 0.0;
    for (const auto& c : classes_) s += c.lambda;
    return s;
  }

  bool operator==(const SystemConfig&) const = default;

 private:
  SystemConfig() = default;

  template <class Get>
  double reduce(Get get, bool take_min) const {
    double v = get(classes_.front());
    for (const auto& c : classes_) v = take_min ? std::min(v, get(c)) : std::max(v, get(c));
    return v;
  }

  std::vector<ClassParams> classes_;
  double r_ = 1.0;
  double a_ = 1.0;
  double sqrt_r_ = 1.0;
  int n_servers_ = 0;
};

inline SystemConfig build_config(std::vector<ClassParams> classes, double r, double a) {
  return SystemConfig::build(std::move(classes), r, a);
}

/// Offered load divided by the number of servers.
inline double nominal_utilization(const SystemConfig& cfg) {
  double offered = 0.0;
  for (std::size_t i = 0; i < cfg.num_classes(); ++i) offered += cfg.cls(i).lambda * cfg.r() / cfg.cls(i).mu;
  return offered / cfg.n_servers();
}

struct MacroState {
  Counts z;    // in system
  Counts psi;  // in service

  MacroState() = default;
  explicit MacroState(std::size_t classes) : z(classes, 0), psi(classes, 0) {}
  MacroState(Counts z_, Counts psi_) : z(std::move(z_)), psi(std::move(psi_)) {}

  int q(std::size_t i) const { return z[i] - psi[i]; }
  int total() const { return std::accumulate(z.begin(), z.end(), 0); }
  int busy() const { return std::accumulate(psi.begin(), psi.end(), 0); }
  int queued() const { return total() - busy(); }

  bool operator==(const MacroState&) const = default;
};

struct ScaledObservables {
  std::vector<double> z_hat;
  double z_hat_total = 0.0;
  double phi_hat = 0.0;
  double q_hat = 0.0;
  std::vector<double> q_hat_class;

  double z_pos_sum() const {
    double s = 0.0;
    for (double v : z_hat) s += std::max(v, 0.0);
    return s;
  }
  double z_neg_sum() const {
    double s = 0.0;
    for (double v : z_hat) s += std::max(-v, 0.0);
    return s;
  }
};

inline ScaledObservables scale_state(const MacroState& s, const SystemConfig& cfg) {
  ScaledObservables out;
  const std::size_t d = cfg.num_classes();
  out.z_hat.resize(d);
  out.q_hat_class.resize(d);
  int queued = 0;
  for (std::size_t i = 0; i < d; ++i) {
    out.z_hat[i] = (s.z[i] - cfg.rho(i) * cfg.r()) / cfg.sqrt_r();
    out.z_hat_total += out.z_hat[i];
    out.phi_hat += out.z_hat[i] / cfg.cls(i).mu;
    out.q_hat_class[i] = s.q(i) / cfg.sqrt_r();
    queued += s.q(i);
  }
  out.q_hat = queued / cfg.sqrt_r();
  return out;
}

/// Returns one message per violated invariant; empty means the state is valid.
inline std::vector<std::string> validate_macro_state(const MacroState& s, const SystemConfig& cfg) {
  std::vector<std::string> out;
  const std::size_t d = cfg.num_classes();
  if (s.z.size() != d || s.psi.size() != d) {
    out.push_back("dimension mismatch: expected " + std::to_string(d) + " classes");
    return out;
  }
  long total = 0;
  long busy = 0;
  for (std::size_t i = 0; i < d; ++i) {
    if (s.z[i] < 0) out.push_back("negative count: Z[" + std::to_string(i) + "]=" + std::to_string(s.z[i]));
    if (s.psi[i] < 0) out.push_back("negative count: Psi[" + std::to_string(i) + "]=" + std::to_string(s.psi[i]));
    if (s.psi[i] > s.z[i])
      out.push_back("Psi[" + std::to_string(i) + "]=" + std::to_string(s.psi[i]) + " exceeds Z[" +
                    std::to_string(i) + "]=" + std::to_string(s.z[i]));
    total += s.z[i];
    busy += s.psi[i];
  }
  const long expected = std::min<long>(cfg.n_servers(), total);
  if (busy != expected)
    out.push_back("non-idling broken: sum Psi=" + std::to_string(busy) + " but min(N, sum Z)=" + std::to_string(expected));
  return out;
}

}  // namespace hwq
