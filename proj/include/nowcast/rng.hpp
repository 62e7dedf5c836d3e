#pragma once

#include <cstdint>

namespace nowcast {

/// Counter-based random stream: value k depends only on (seed, k), so a
/// consumer can resume at any draw index without replaying the stream.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t bits(std::uint64_t index, std::uint64_t lane = 0) const {
    return mix(seed_ ^ mix(index * 0x9E3779B97F4A7C15ull + lane));
  }

  /// Uniform double in [0, 1).
  double uniform(std::uint64_t index, std::uint64_t lane = 0) const {
    return static_cast<double>(bits(index, lane) >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n) by 128-bit multiply-shift.
  std::uint64_t below(std::uint64_t n, std::uint64_t index, std::uint64_t lane = 0) const {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(bits(index, lane)) * n) >> 64);
  }

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
};

}  // namespace nowcast
