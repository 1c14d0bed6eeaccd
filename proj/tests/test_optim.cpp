#include <doctest.h>

#include <cmath>
#include <numbers>

#include "errors.hpp"
#include "linalg.hpp"
#include "optim.hpp"

using namespace d2lora;

namespace {

OptimConfig schedule(double lr, std::size_t warmup, std::size_t total) {
  OptimConfig c;
  c.lr = lr;
  c.warmup_steps = warmup;
  c.total_steps = total;
  return c;
}

}  // namespace

TEST_CASE("lr_at: endpoints and midpoint") {
  auto c = schedule(1e-3, 100, 1100);
  CHECK(lr_at(0, c) == 0.0);
  CHECK(lr_at(50, c) == doctest::Approx(0.5e-3));
  CHECK(lr_at(100, c) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(lr_at(1100, c) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(lr_at(600, c) == doctest::Approx(0.55e-3).epsilon(1e-12));
  CHECK(lr_at(5000, c) == doctest::Approx(1e-4).epsilon(1e-15));
}

TEST_CASE("lr_at: continuous at the boundary, non-increasing after warmup, floored") {
  auto c = schedule(2e-3, 10, 200);
  const double below = lr_at(9, c), at = lr_at(10, c);
  CHECK(at - below <= c.lr / 10.0 + 1e-18);
  for (std::size_t s = 10; s < 250; ++s) {
    CHECK(lr_at(s + 1, c) <= lr_at(s, c));
    CHECK(lr_at(s, c) >= 0.1 * c.lr - 1e-18);
  }
}

TEST_CASE("lr_at: total_steps <= warmup is a configuration error") {
  CHECK_THROWS_AS(lr_at(0, schedule(1e-3, 100, 100)), ConfigError);
  CHECK_THROWS_AS(lr_at(0, schedule(1e-3, 100, 10)), ConfigError);
}

TEST_CASE("OptimConfig::validate") {
  OptimConfig c;
  CHECK_NOTHROW(c.validate());
  c.beta1 = 0.9995;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lr_floor_ratio = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lr = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.clip_norm = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("clip_global_norm: examples") {
  std::vector<double> v{0, 0}, g{1.2, 1.6};  // norm 2
  std::vector<ParamSlot> slots{{v, g}};
  CHECK(clip_global_norm(slots, 1.0) == doctest::Approx(0.5));
  CHECK(global_norm(slots) == doctest::Approx(1.0));

  std::vector<double> h{0.18, 0.24};  // norm 0.3
  std::vector<ParamSlot> small{{v, h}};
  CHECK(clip_global_norm(small, 1.0) == 1.0);
  CHECK(h == std::vector<double>{0.18, 0.24});
  CHECK_THROWS_AS(clip_global_norm(small, 0.0), ConfigError);
}

TEST_CASE("clip_global_norm: post-clip norm bounded on random bundles") {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::vector<double>> vals, grads;
    const std::size_t n = 1 + rng.below(5);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = 1 + rng.below(30);
      vals.emplace_back(len, 0.0);
      grads.emplace_back(len);
      for (double& x : grads.back()) x = rng.normal(3.0);
    }
    std::vector<ParamSlot> slots;
    for (std::size_t i = 0; i < n; ++i) slots.push_back({vals[i], grads[i]});
    const double max = 0.1 + rng.uniform();
    clip_global_norm(slots, max);
    CHECK(global_norm(slots) <= max + 1e-12);
  }
}

TEST_CASE("AdamW: matches a hand-written update") {
  OptimConfig c;
  c.weight_decay = 0.05;
  Rng rng(4);
  std::vector<double> p(7), q, g(7);
  for (double& x : p) x = rng.normal();
  q = p;
  std::vector<double> m(7, 0.0), v(7, 0.0);
  AdamW opt(c);
  for (int step = 1; step <= 20; ++step) {
    for (double& x : g) x = rng.normal();
    const double lr = 1e-2 / step;
    std::vector<ParamSlot> slots{{p, g}};
    opt.step(slots, lr);
    for (std::size_t k = 0; k < 7; ++k) {
      m[k] = 0.9 * m[k] + 0.1 * g[k];
      v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
      const double mh = m[k] / (1 - std::pow(0.9, step));
      const double vh = v[k] / (1 - std::pow(0.999, step));
      q[k] = q[k] * (1 - lr * 0.05) - lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (std::size_t k = 0; k < 7; ++k) CHECK(p[k] == doctest::Approx(q[k]).epsilon(1e-14));
  CHECK(opt.step_count() == 20);
  CHECK(opt.state_size() == 14);
}

TEST_CASE("AdamW: zero gradient is pure decay; decay=false slots are untouched") {
  OptimConfig c;
  c.weight_decay = 0.1;
  std::vector<double> p{2.0, -4.0}, g{0.0, 0.0}, t{0.7}, tg{0.0};
  std::vector<ParamSlot> slots{{p, g, true}, {t, tg, false}};
  AdamW opt(c);
  opt.step(slots, 0.5);
  CHECK(p[0] == doctest::Approx(2.0 * 0.95).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-4.0 * 0.95).epsilon(1e-15));
  CHECK(t[0] == 0.7);
}

TEST_CASE("AdamW: constant gradient approaches an lr-sized sign step") {
  OptimConfig c;
  c.weight_decay = 0.0;
  std::vector<double> p{0.0}, g{0.37};
  std::vector<ParamSlot> slots{{p, g}};
  AdamW opt(c);
  double prev = 0.0;
  for (int i = 0; i < 1000; ++i) {
    prev = p[0];
    g[0] = 0.37;
    opt.step(slots, 1e-3);
  }
  CHECK(std::abs((prev - p[0]) - 1e-3) < 1e-9);
}

TEST_CASE("AdamW: lr = 0 leaves parameters unchanged; runs are reproducible") {
  OptimConfig c;
  std::vector<double> p{1.0, 2.0}, g{0.5, -0.5};
  std::vector<ParamSlot> slots{{p, g}};
  AdamW opt(c);
  opt.step(slots, 0.0);
  CHECK(p == std::vector<double>{1.0, 2.0});

  auto run = [&] {
    Rng rng(8);
    std::vector<double> x(5, 1.0), gx(5);
    std::vector<ParamSlot> s{{x, gx}};
    AdamW o(c);
    for (int i = 0; i < 50; ++i) {
      for (double& v : gx) v = rng.normal();
      o.step(s, 1e-2);
    }
    return x;
  };
  CHECK(run() == run());
}

TEST_CASE("AdamW: layout change is a shape error") {
  std::vector<double> p{1.0}, g{1.0}, p2{1.0, 2.0}, g2{1.0, 1.0};
  AdamW opt(OptimConfig{});
  std::vector<ParamSlot> a{{p, g}};
  opt.step(a, 1e-3);
  std::vector<ParamSlot> b{{p, g}, {p2, g2}};
  CHECK_THROWS_AS(opt.step(b, 1e-3), ShapeError);
}

TEST_CASE("tangent_project: examples and orthogonality") {
  std::vector<double> u{1, 0}, g{3, 4};
  CHECK(tangent_project(u, g) == Vector{0, 4});
  std::vector<double> par{2, 0};
  CHECK(tangent_project(u, par) == Vector{0, 0});
  std::vector<double> z{0, 0};
  CHECK_THROWS_AS(tangent_project(z, g), NumericError);

  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> a(n), b(n);
    for (double& x : a) x = rng.normal();
    for (double& x : b) x = rng.normal(5.0);
    const Vector out = tangent_project(a, b);
    CHECK(std::abs(dot(a, out)) <= 1e-12 * norm2(a) * norm2(b));
  }
}
