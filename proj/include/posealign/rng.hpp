#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace posealign {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: draw n of stream (seed, key) is a pure function
/// of (seed, key, n), so independent streams can be produced in any order.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t key, std::uint64_t counter = 0)
      : base_(splitmix64(splitmix64(seed) ^ (key * 0xd1b54a32d192ed03ULL + 0x632be59bd9b4e019ULL))),
        counter_(counter) {}

  std::uint64_t next_u64() { return splitmix64(base_ ^ splitmix64(counter_++)); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (consumes two draws).
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t base_;
  std::uint64_t counter_;
};

}  // namespace posealign
