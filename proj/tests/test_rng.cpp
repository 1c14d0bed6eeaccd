#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "rng.hpp"

using namespace d2lora;

TEST_CASE("rng: bit stream is the standard mt19937_64") {
  // The C++ standard pins the 10000th output of a default-seeded engine.
  Rng r(5489);
  for (int i = 0; i < 9999; ++i) r.next();
  CHECK(r.next() == 9981545732273789042ULL);
}

TEST_CASE("rng: same seed gives the same stream") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.normal() == b.normal());
  CHECK(a == b);
}

TEST_CASE("rng: uniform lies in [0, 1) and matches the documented formula") {
  Rng r(3);
  std::mt19937_64 ref(3);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(u == static_cast<double>(ref() >> 11) / 9007199254740992.0);
  }
}

TEST_CASE("rng: normal moments") {
  Rng r(11);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  const double mean = s / n;
  CHECK(std::abs(mean) < 5.0 / std::sqrt(double(n)));
  CHECK(s2 / n - mean * mean == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("rng: normal consumes exactly two uniforms") {
  Rng a(9), b(9);
  const double z = a.normal();
  const double u1 = 1.0 - b.uniform();
  const double u2 = b.uniform();
  CHECK(z == std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2));
  CHECK(a == b);
}

TEST_CASE("rng: bernoulli_keep rate") {
  Rng r(5);
  int kept = 0;
  for (int i = 0; i < 100000; ++i) kept += r.bernoulli_keep(0.1);
  CHECK(kept / 100000.0 == doctest::Approx(0.9).epsilon(0.01));
  Rng z(5);
  for (int i = 0; i < 1000; ++i) CHECK(z.bernoulli_keep(0.0));
}

TEST_CASE("rng: below stays in range and covers it") {
  Rng r(1);
  std::set<std::size_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.below(7);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("rng: derived seeds are deterministic and distinct per stream") {
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
  std::set<std::uint64_t> s;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (std::uint64_t stream = 0; stream < 20; ++stream) s.insert(derive_seed(seed, stream));
  CHECK(s.size() == 400);
}
