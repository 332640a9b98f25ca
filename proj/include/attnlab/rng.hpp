#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace attnlab {

// Mixes a base seed with stream/index tags so that independent random
// streams (corpus, masking, init, dropout) never overlap. SplitMix64
// finalizer; stable across platforms.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream,
                              std::uint64_t index = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1) +
                    0xbf58476d1ce4e5b9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic random stream. mt19937_64 output is pinned by the standard;
// the distribution helpers are hand-rolled because std::*_distribution
// results are implementation-defined and would break bit-reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), rejection sampling to remove modulo bias
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    std::uint64_t r = next_u64();
    while (r < threshold) r = next_u64();
    return r % n;
  }

  // Standard normal via Box-Muller. Consumes exactly two draws per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();  // guard log(0)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // N(0, stddev^2) clipped to +-clip_sigmas by rejection.
  double truncated_normal(double stddev, double clip_sigmas) {
    double z = normal();
    while (std::fabs(z) > clip_sigmas) z = normal();
    return stddev * z;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace attnlab
