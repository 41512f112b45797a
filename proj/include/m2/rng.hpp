#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace m2 {

// Counter-based PRNG on the splitmix64 finalizer.
//
// The i-th raw draw is mix64(base + (i+1) * GOLDEN) where
// base = mix64(mix64(seed) ^ stream). State is (seed, stream, counter), so
// equal seeds give equal sequences on every platform, and distinct streams
// are independent. Parameter tensors each draw from a stream keyed by their
// canonical name (stream_of), which keeps a tensor's values stable no matter
// what else a particular build variant allocates.
class Rng {
public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : base_(mix64(mix64(seed) ^ stream)) {}

  std::uint64_t next_u64() { return mix64(base_ + (++counter_) * kGolden); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; consumes two raw draws.
  double normal() {
    const double u1 =
        (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 =
        (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    return n == 0 ? 0 : next_u64() % n;
  }

  // FNV-1a 64 of a tensor/stream name.
  static std::uint64_t stream_of(std::string_view name) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    return h;
  }

private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
  static constexpr double kPi = 3.141592653589793238462643383279502884;

  static std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t base_;
  std::uint64_t counter_ = 0;
};

} // namespace m2
