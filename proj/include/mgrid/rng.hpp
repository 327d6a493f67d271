#pragma once

#include <cmath>
#include <cstdint>

/**
 * Counter-based deterministic random number generation.
 *
 * Every random draw in the toolkit is keyed by (master seed, purpose, and up
 * to three counters such as trial, slot, bus). Streams with distinct keys are
 * statistically independent, and a stream's output never depends on which
 * thread or in which order it is consumed. This is what makes Monte Carlo
 * outputs byte-identical for any --parallel setting.
 */
namespace mgrid {

/// Stream labels; each purpose owns an independent key subspace.
enum class RngPurpose : std::uint64_t {
  mphase_codes = 1,
  measurement_noise = 2,
  theta_draw = 3,
  dispatch_instances = 4,
  generic = 5,
  jacobian_probe = 6,
};

namespace detail {

/// SplitMix64 output mixing function (Steele, Lea, Flood 2014 finalizer).
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Absorbs one 64-bit word into a key, avalanching the whole state.
inline std::uint64_t absorb(std::uint64_t key, std::uint64_t word) {
  std::uint64_t s = key ^ (word + 0x9E3779B97F4A7C15ull);
  return splitmix64(s) ^ splitmix64(s);
}

}  // namespace detail

/**
 * A small deterministic generator seeded from a composite key.
 *
 * Construction cost is a handful of multiplies, so creating one generator per
 * (trial, slot, bus) triple is the intended usage pattern.
 */
class Rng {
 public:
  Rng(std::uint64_t seed, RngPurpose purpose, std::uint64_t c0 = 0,
      std::uint64_t c1 = 0, std::uint64_t c2 = 0) {
    std::uint64_t k = detail::absorb(0x243F6A8885A308D3ull, seed);
    k = detail::absorb(k, static_cast<std::uint64_t>(purpose));
    k = detail::absorb(k, c0);
    k = detail::absorb(k, c1);
    k = detail::absorb(k, c2);
    state_ = k;
  }

  std::uint64_t next_u64() { return detail::splitmix64(state_); }

  /// Uniform draw on (0, 1); never returns 0 so log() stays finite.
  double uniform01() {
    const std::uint64_t bits = next_u64() >> 11;  // 53 significant bits
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  /// Uniform draw on [lo, hi].
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Fair coin mapped to {-1.0, +1.0}.
  double sign() { return (next_u64() >> 63) ? 1.0 : -1.0; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Multiply-shift rejection-free mapping; bias is negligible for n << 2^64.
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller with a cached spare deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mgrid
