#pragma once

// Poisson pmf in log space and the Gaussian-type tail bounds for the
// negative part of a centred Poisson variable.

#include <algorithm>
#include <cmath>
#include <numbers>

#include <boost/math/distributions/poisson.hpp>

#include "hwq/error.hpp"

namespace hwq {

inline double poisson_pmf(double p, long n) {
  if (n < 0) return 0.0;
  return boost::math::pdf(boost::math::poisson_distribution<>(p), static_cast<double>(n));
}

/// Log pmf; falls back to the lgamma form where the pmf underflows.
inline double poisson_log_pmf(double p, long n) {
  if (n < 0) return -INFINITY;
  const double h = poisson_pmf(p, n);
  if (h > 0.0) return std::log(h);
  return -p + static_cast<double>(n) * std::log(p) - std::lgamma(static_cast<double>(n) + 1.0);
}

/// Smallest C with h_n(p) <= C p^{-1/2} exp(-(n-p)^2/(2p)) for all 0 <= n <= p.
inline double poisson_bound_scan(double p) {
  if (!(p > 0.0)) throw Error(Errc::InvalidArgument, "Poisson mean must be positive");
  const long m = static_cast<long>(std::floor(p));
  double best = 0.0;
  for (long n = 0; n <= m; ++n) {
    const double dev = static_cast<double>(n) - p;
    // log of h_n / (p^{-1/2} exp(-dev^2/(2p)))
    const double log_ratio = poisson_log_pmf(p, n) + 0.5 * std::log(p) + dev * dev / (2.0 * p);
    best = std::max(best, std::exp(log_ratio));
  }
  return best;
}

/// E exp(theta * (G - rho r)/sqrt(r)) for G ~ Poisson(rho r).
inline double scaled_poisson_mgf(double theta, double rho, double r) {
  const double sr = std::sqrt(r);
  return std::exp(-theta * rho * sr - rho * r * (1.0 - std::exp(theta / sr)));
}

/// E exp(theta [(H - p)^-]^2 / p) for H ~ Poisson(p), summed directly; n >= p contributes h_n.
inline double negpart_square_mgf(double theta, double p) {
  if (!(theta >= 0.0) || theta >= 0.5) throw Error(Errc::ThetaOutOfRange, "need 0 <= theta < 1/2");
  if (!(p > 0.0)) throw Error(Errc::InvalidArgument, "Poisson mean must be positive");
  double below = 0.0;
  double below_mass = 0.0;
  const long m = static_cast<long>(std::ceil(p)) - 1;  // n < p
  for (long n = 0; n <= m; ++n) {
    const double dev = p - static_cast<double>(n);
    const double lp = poisson_log_pmf(p, n);
    below += std::exp(lp + theta * dev * dev / p);
    below_mass += std::exp(lp);
  }
  return below + std::max(0.0, 1.0 - below_mass);
}

/// 1 + C * int_{-inf}^0 exp(-(1/2 - theta) xi^2) dxi.
inline double negpart_square_mgf_bound(double theta, double c) {
  if (!(theta >= 0.0) || theta >= 0.5) throw Error(Errc::ThetaOutOfRange, "need 0 <= theta < 1/2");
  return 1.0 + c * 0.5 * std::sqrt(std::numbers::pi / (0.5 - theta));
}

}  // namespace hwq
