#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace psat {

// SplitMix64. Small, fast, and its value stream is pinned by these ~15 lines,
// which the determinism contracts (same seed -> bitwise same run) rely on.
inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Order-sensitive pair hash used to derive substreams: members from a run
// seed, per-example attack streams from (seed, epoch, index), and so on.
inline uint64_t mix64(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  uint64_t z = s;
  splitmix64(z);
  return splitmix64(z);
}

class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one normal per call, no cached second value: every call
  // consumes exactly two raw draws so stream positions are predictable.
  double normal() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Fisher-Yates; uniform index via rejection-free modulo is avoided, we use
  // 64-bit multiply-shift which is unbiased enough at these sizes and stable.
  std::vector<size_t> permutation(size_t n) {
    std::vector<size_t> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = i;
    for (size_t i = n; i > 1; --i) {
      size_t j = static_cast<size_t>((static_cast<unsigned __int128>(next_u64()) * i) >> 64);
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

 private:
  uint64_t state_;
};

}  // namespace psat
