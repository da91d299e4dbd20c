#pragma once

#include <cstdint>

namespace circ {

// splitmix64 step, used to expand a seed into generator state and to
// derive per-purpose sub-seeds.
inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256++ with splitmix64 seeding. Integer-only state updates, so the
// stream is identical on every platform for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // Uniform in [0, 1), 53-bit mantissa.
  double uniform();

  // Standard normal via Box-Muller (cosine branch).
  double gaussian();

  // exp(mu + sigma * N(0,1)).
  double lognormal(double mu, double sigma);

  // Uniform integer in [0, n). Rejection-free modulo is fine at the scales
  // used here; documented as part of the stream contract.
  std::uint64_t below(std::uint64_t n);

  // Independent stream addressed by (base seed, stream id).
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

}  // namespace circ
