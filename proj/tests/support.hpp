#pragma once

// Statistical helpers shared by the unit tests and the acceptance runner.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "hwq/coupling.hpp"
#include "hwq/poisson.hpp"

namespace hwq::test {

struct MeanSd {
  double mean = 0.0;
  double sd_of_mean = 0.0;
};

inline MeanSd mean_sd(const std::vector<double>& xs) {
  MeanSd out;
  const double n = static_cast<double>(xs.size());
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.sd_of_mean = std::sqrt(ss / (n - 1.0) / n);
  return out;
}

/// Chi-square goodness of fit of integer samples against Poisson(mean); bins
/// are grown left to right until each expects at least 5 samples.
inline double poisson_chi_square_pvalue(const std::vector<int>& samples, double mean) {
  int top = 0;
  for (int s : samples) top = std::max(top, s);
  std::vector<double> counts(top + 1, 0.0);
  for (int s : samples) counts[s] += 1.0;
  const double n = static_cast<double>(samples.size());

  std::vector<double> obs, expd;
  double o = 0.0, e = 0.0, used = 0.0;
  for (int k = 0; k <= top; ++k) {
    const double p = poisson_pmf(mean, k);
    o += counts[k];
    e += n * p;
    used += p;
    if (e >= 5.0) {
      obs.push_back(o);
      expd.push_back(e);
      o = e = 0.0;
    }
  }
  // right tail beyond the largest sample
  e += n * std::max(0.0, 1.0 - used);
  if (e < 5.0 && !obs.empty()) {
    obs.back() += o;
    expd.back() += e;
  } else {
    obs.push_back(o);
    expd.push_back(e);
  }
  double chi2 = 0.0;
  for (std::size_t b = 0; b < obs.size(); ++b) chi2 += (obs[b] - expd[b]) * (obs[b] - expd[b]) / expd[b];
  const boost::math::chi_squared dist(static_cast<double>(obs.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, chi2));
}

/// Class-i infinite-server counts sampled every `spacing` time units after
/// `warmup` time units; spacing of several mean service times makes the
/// samples nearly independent.
inline std::vector<int> sample_infserver_g(const SystemConfig& cfg, PolicyKind kind, std::size_t cls,
                                           std::size_t n_samples, double spacing, double warmup, RngStream& rng,
                                           CouplingReport* report = nullptr) {
  std::vector<int> out;
  out.reserve(n_samples);
  double clock = 0.0;
  double next = warmup;
  // event budget: 2.5 times the stationary event rate; callers check the sample count
  const auto events = static_cast<std::uint64_t>(
      (warmup + spacing * static_cast<double>(n_samples)) * 2.5 * cfg.lambda_sum() * cfg.r() + 1000.0);
  auto rep = run_infserver_coupled(cfg, kind, {events, true}, rng, [&](double dt, const InfServerJointState& js) {
    while (out.size() < n_samples && next < clock + dt) {
      out.push_back(js.g(cls));
      next += spacing;
    }
    clock += dt;
  });
  if (report) *report = rep;
  return out;
}

}  // namespace hwq::test
