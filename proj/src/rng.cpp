#include "circ/rng.hpp"

#include <cmath>

namespace circ {

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}
}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& w : s_) w = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
  // u1 is mapped into (0, 1] so the log stays finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return r * std::cos(2.0 * 3.14159265358979323846 * u2);
}

double Rng::lognormal(double mu, double sigma) {
  return std::exp(mu + sigma * gaussian());
}

std::uint64_t Rng::below(std::uint64_t n) {
  return next_u64() % n;
}

Rng Rng::fork(std::uint64_t stream) const {
  std::uint64_t x = seed_ ^ 0xa5a5a5a5a5a5a5a5ULL;
  std::uint64_t a = splitmix64(x);
  x ^= stream * 0x9e3779b97f4a7c15ULL;
  std::uint64_t b = splitmix64(x);
  return Rng(a ^ b);
}

}  // namespace circ
