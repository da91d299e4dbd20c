#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "circ/rng.hpp"
#include "doctest.h"

using namespace circ;

TEST_CASE("same seed, same stream") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; i++) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("different seeds diverge") {
  Rng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 100; i++) same += a.next_u64() == b.next_u64();
  CHECK(same == 0);
}

TEST_CASE("uniform stays in [0, 1)") {
  Rng r(7);
  for (int i = 0; i < 10000; i++) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("gaussian moments") {
  Rng r(11);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; i++) {
    const double g = r.gaussian();
    s += g;
    s2 += g * g;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::fabs(mean) < 0.01);
  CHECK(std::fabs(var - 1.0) < 0.02);
}

TEST_CASE("lognormal is exp of gaussian") {
  Rng a(5), b(5);
  for (int i = 0; i < 100; i++) {
    CHECK(a.lognormal(0.0, 1.0) == doctest::Approx(std::exp(b.gaussian())).epsilon(1e-12));
  }
}

TEST_CASE("below respects the bound") {
  Rng r(13);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 5000; i++) {
    const auto v = r.below(17);
    CHECK(v < 17);
    seen.insert(v);
  }
  CHECK(seen.size() == 17);
}

TEST_CASE("forks differ from the parent and from each other") {
  Rng parent(99);
  Rng f1 = Rng(99).fork(1);
  Rng f2 = Rng(99).fork(2);
  int same1 = 0, same2 = 0, same12 = 0;
  for (int i = 0; i < 100; i++) {
    const auto p = parent.next_u64();
    const auto a = f1.next_u64();
    const auto b = f2.next_u64();
    same1 += p == a;
    same2 += p == b;
    same12 += a == b;
  }
  CHECK(same1 == 0);
  CHECK(same2 == 0);
  CHECK(same12 == 0);
}

TEST_CASE("fork is a pure function of seed and stream") {
  Rng a = Rng(3).fork(10);
  Rng b = Rng(3).fork(10);
  for (int i = 0; i < 100; i++) CHECK(a.next_u64() == b.next_u64());
}
