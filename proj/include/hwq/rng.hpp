#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace hwq {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Reproducible random stream. The engine seed is
/// splitmix64(splitmix64(seed) ^ (stream + 1) * golden), so streams of one
/// master seed are distinct and every (seed, stream) pair is replayable.
/// Variates are derived from raw engine output only (no std distributions,
/// whose algorithms are implementation-defined).
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream),
        engine_(splitmix64(splitmix64(seed) ^ ((stream + 1) * 0x9E3779B97F4A7C15ULL))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Exponential with the given rate (> 0).
  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const auto k = static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
    return k < n ? k : n - 1;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

}  // namespace hwq
