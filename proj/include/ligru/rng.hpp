// SPDX-License-Identifier: Apache-2.0
/**
 * @file   rng.hpp
 * @brief  Seeded xoshiro256** stream with platform-independent draws.
 *
 * The standard library distributions are implementation-defined, so the
 * uniform, Gaussian and Bernoulli draws are derived here directly from the
 * 64-bit output. Seeds are expanded with splitmix64.
 */
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace ligru {

class RngStream {
public:
  using State = std::array<std::uint64_t, 4>;

  explicit RngStream(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    seed_ = seed;
    std::uint64_t x = seed;
    for (auto &s : state_)
      s = splitmix64(x);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  const State &state() const noexcept { return state_; }
  void set_state(const State &s) noexcept { state_ = s; }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
  }

  /// Uniform integer in [0, n). Uses rejection to stay unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1)
      return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller; one draw consumes two uniforms.
  double normal() noexcept {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept {
    return mean + stddev * normal();
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Derives an independent stream, e.g. for a data generator.
  RngStream fork(std::uint64_t salt) {
    return RngStream(next() ^ (salt * 0x9E3779B97F4A7C15ULL));
  }

private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }
  static std::uint64_t splitmix64(std::uint64_t &x) noexcept {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_ = 0;
  State state_{};
};

} // namespace ligru
