#pragma once

#include <array>
#include <cstdint>

namespace protomix {

/// SplitMix64 finalizer. Used both to expand seeds and to derive per-stream
/// seeds, so it is part of the reproducibility contract.
std::uint64_t splitmix64(std::uint64_t& state);

/// Seed for an independent sub-stream (trial, class, cell) of a base seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// xoshiro256** 1.0 with state expanded from a 64-bit seed by SplitMix64.
///
/// Every draw the toolkit makes goes through this generator and the three
/// helpers below, whose algorithms are fixed:
///   - uniform_below(n): rejection on the low end, threshold = 2^64 mod n,
///     then r mod n;
///   - uniform01(): (r >> 11) * 2^-53, in [0, 1);
///   - normal(): Box-Muller on u1 = 1 - uniform01(), u2 = uniform01(),
///     returning r*cos(2*pi*u2) first and caching r*sin(2*pi*u2).
class Xoshiro256 {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256(std::uint64_t seed);

  std::uint64_t next();
  std::uint64_t operator()() { return next(); }
  static constexpr std::uint64_t min() { return 0; }
  static constexpr std::uint64_t max() { return ~std::uint64_t{0}; }

  std::uint64_t uniform_below(std::uint64_t n);
  double uniform01();
  double normal();

 private:
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace protomix
