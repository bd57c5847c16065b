#pragma once

#include <cmath>
#include <cstdint>

namespace kroncast {

// Counter-based splittable generator (splitmix64 core). Pure integer
// arithmetic, so a given seed yields the same draw sequence on every
// platform. Streams are cheap to split; each worker owns its own stream.
class RngStream {
 public:
  static constexpr const char* kAlgorithm = "splitmix64-counter";

  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform on (0,1); 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; deterministic, no cached spare.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Gumbel(0,1) draw: -log(-log U) with U clamped away from {0,1}.
  double gumbel() {
    double u = uniform();
    if (u < 1e-12) u = 1e-12;
    if (u > 1.0 - 1e-12) u = 1.0 - 1e-12;
    return -std::log(-std::log(u));
  }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return n == 0 ? 0 : next_u64() % n;
  }

  // Derive an independent stream; split(i) of equal-seed streams agree.
  RngStream split(std::uint64_t index) const {
    RngStream child(state_ ^ (0x6a09e667f3bcc909ULL + index * 0x3c6ef372fe94f82bULL));
    child.next_u64();
    return child;
  }

 private:
  std::uint64_t state_;
};

}  // namespace kroncast
