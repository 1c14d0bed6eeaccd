#include <doctest.h>

#include <cmath>

#include "errors.hpp"
#include "model.hpp"

using namespace d2lora;

namespace {

AdapterConfig no_dropout() {
  AdapterConfig c;
  c.rank_plus = c.rank_minus = 2;
  c.alpha = 4;
  c.input_dropout_p = 0.0;
  return c;
}

void randomize_factors(ToyNet& net, Rng& rng, double std) {
  for (auto& m : net.modules()) {
    if (!m.adapter) continue;
    auto& f = m.adapter->mutable_factors();
    for (Matrix* p : {&f.a_plus, &f.b_plus, &f.a_minus, &f.b_minus})
      for (double& v : p->values()) v = rng.normal(std);
  }
}

}  // namespace

TEST_CASE("build: deterministic, shapes, errors") {
  ToyNet a(16, 4, 8, 3), b(16, 4, 8, 3);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(a.modules()[i].weight == b.modules()[i].weight);
    CHECK(a.modules()[i].bias == b.modules()[i].bias);
  }
  CHECK(a.module("head").d_out() == 4);
  CHECK(a.module("q").weight.rows() == 16);
  Rng rng(1);
  CHECK(a.forward(gaussian(16, 16, 1.0, rng), Mode::eval).logits.cols() == 4);
  CHECK_THROWS_AS(ToyNet(1, 4, 8, 0), ConfigError);
  CHECK_THROWS_AS(a.forward(Matrix(8, 15), Mode::eval), ShapeError);
  CHECK_THROWS_AS(a.forward(Matrix(7, 16), Mode::eval), ShapeError);
}

TEST_CASE("forward: zero tokens give the head bias") {
  ToyNet net(16, 4, 8, 5);
  Matrix logits = net.forward(Matrix(16, 16), Mode::eval).logits;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(logits(i, j) == net.module("head").bias[j]);
}

TEST_CASE("forward: batch independence") {
  ToyNet net(8, 3, 4, 6);
  net.inject_adapters({"q", "k", "v", "o"}, no_dropout());
  Rng rng(2);
  randomize_factors(net, rng, 0.3);
  Matrix tokens = gaussian(8 * 4, 8, 1.0, rng);
  Matrix all = net.forward(tokens, Mode::eval).logits;
  for (std::size_t s = 0; s < 8; ++s) {
    Matrix one(4, 8);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t c = 0; c < 8; ++c) one(t, c) = tokens(s * 4 + t, c);
    Matrix l = net.forward(one, Mode::eval).logits;
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(l(0, j) - all(s, j)) < 1e-13);
  }
}

TEST_CASE("inject: counts, unknown targets, frozen weights untouched") {
  ToyNet net(16, 4, 8, 7);
  const Matrix q_before = net.module("q").weight;
  CHECK(net.inject_adapters({}, AdapterConfig{}) == 0);
  CHECK(net.adapted_count() == 0);
  CHECK_THROWS_AS(net.inject_adapters({"q", "nope"}, AdapterConfig{}), ConfigError);
  CHECK(net.adapted_count() == 0);
  CHECK(net.inject_adapters({"q", "k", "v", "o"}, AdapterConfig{}) == 4);
  CHECK(net.module("q").weight == q_before);
  CHECK(net.module("q").adapter->base_weight() == q_before);
  CHECK(!net.module("head").adapter);
  CHECK_THROWS_AS(net.inject_adapters({"q"}, AdapterConfig{}), StateError);

  ToyNet three(16, 4, 8, 7);
  three.inject_adapters({"q", "v", "o"}, AdapterConfig{});
  CHECK(4 * three.count_parameters().trainable == 3 * net.count_parameters().trainable);
}

TEST_CASE("inject: empty target set and fresh adapters leave logits unchanged") {
  ToyNet plain(16, 4, 8, 8), empty(16, 4, 8, 8), fresh(16, 4, 8, 8);
  empty.inject_adapters({}, AdapterConfig{});
  fresh.inject_adapters({"q", "k", "v", "o"}, AdapterConfig{});
  Rng rng(3);
  Matrix tokens = gaussian(24, 16, 1.0, rng);
  Matrix ref = plain.forward(tokens, Mode::eval).logits;
  CHECK(empty.forward(tokens, Mode::eval).logits == ref);
  Matrix fr = fresh.forward(tokens, Mode::eval).logits;
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(fr.values()[i] - ref.values()[i]) < 1e-13);
}

TEST_CASE("merge_all: eval parity, one product per module, bit-exact unmerge") {
  ToyNet net(12, 3, 6, 9);
  net.inject_adapters({"q", "k", "v", "o"}, AdapterConfig{});
  Rng rng(4);
  randomize_factors(net, rng, 0.2);
  std::vector<AdapterFactors> before;
  for (auto& m : net.modules())
    if (m.adapter) before.push_back(m.adapter->factors());
  Matrix tokens = gaussian(6 * 5, 12, 1.0, rng);
  Matrix y0 = net.forward(tokens, Mode::eval).logits;
  net.merge_all();
  CHECK(net.any_merged());
  net.reset_matmul_counts();
  Matrix y1 = net.forward(tokens, Mode::eval).logits;
  CHECK(net.linear_matmul_count() == 5);
  for (std::size_t i = 0; i < y0.size(); ++i) CHECK(std::abs(y0.values()[i] - y1.values()[i]) <= 1e-10);
  net.unmerge_all();
  std::size_t k = 0;
  for (auto& m : net.modules())
    if (m.adapter) CHECK(m.adapter->factors() == before[k++]);

  net.module("q").adapter->merge();
  CHECK_THROWS_AS(net.merge_all(), StateError);
  CHECK_THROWS_AS(net.unmerge_all(), StateError);
}

TEST_CASE("backward: composed central differences on every adapter parameter") {
  for (auto act : {HeadActivation::tanh, HeadActivation::identity}) {
    ToyNet net(6, 3, 4, 10, act);
    AdapterConfig cfg = no_dropout();
    cfg.tau_trainable = true;
    net.inject_adapters({"q", "k", "v", "o"}, cfg);
    Rng rng(11);
    randomize_factors(net, rng, 0.3);
    Matrix tokens = gaussian(3 * 4, 6, 1.0, rng);
    Matrix g = gaussian(3, 3, 1.0, rng);
    auto fw = net.forward(tokens, Mode::train);
    auto bw = net.backward(fw.cache, g);
    REQUIRE(bw.grads.size() == 5);
    CHECK(!bw.grads[4].has_value());
    auto loss = [&] { return inner(net.forward(tokens, Mode::eval).logits, g); };
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t mi = 0; mi < 4; ++mi) {
      auto& layer = *net.modules()[mi].adapter;
      const auto& gb = *bw.grads[mi];
      const std::pair<Matrix AdapterFactors::*, const Matrix*> tensors[] = {
          {&AdapterFactors::a_plus, &gb.d_a_plus},
          {&AdapterFactors::b_plus, &gb.d_b_plus},
          {&AdapterFactors::a_minus, &gb.d_a_minus},
          {&AdapterFactors::b_minus, &gb.d_b_minus}};
      for (auto [member, analytic] : tensors) {
        for (std::size_t i = 0; i < analytic->size(); ++i) {
          const double orig = (layer.mutable_factors().*member).values()[i];
          (layer.mutable_factors().*member).values()[i] = orig + h;
          const double lp = loss();
          (layer.mutable_factors().*member).values()[i] = orig - h;
          const double lm = loss();
          (layer.mutable_factors().*member).values()[i] = orig;
          const double fd = (lp - lm) / (2 * h);
          worst = std::max(worst, std::abs(analytic->values()[i] - fd) / std::max(1.0, std::abs(fd)));
        }
      }
      const double t0 = layer.factors().tau;
      layer.mutable_factors().tau = t0 + h;
      const double lp = loss();
      layer.mutable_factors().tau = t0 - h;
      const double lm = loss();
      layer.mutable_factors().tau = t0;
      const double fd = (lp - lm) / (2 * h);
      worst = std::max(worst, std::abs(*gb.d_tau - fd) / std::max(1.0, std::abs(fd)));
    }
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("softmax_cross_entropy: value and gradient") {
  Matrix logits{{0.0, 0.0}, {std::log(3.0), 0.0}};
  Matrix d;
  const double l = softmax_cross_entropy(logits, {0, 0}, &d);
  CHECK(l == doctest::Approx((std::log(2.0) + std::log(4.0 / 3.0)) / 2.0));
  CHECK(d(0, 0) == doctest::Approx(-0.25));
  CHECK(d(1, 1) == doctest::Approx(0.125));
  CHECK_THROWS(softmax_cross_entropy(logits, {0, 2}, nullptr));
}

TEST_CASE("reassemble from modules") {
  ToyNet net(8, 2, 4, 12);
  ToyNet copy(4, HeadActivation::tanh, net.modules());
  CHECK(copy.embed_dim() == 8);
  CHECK(copy.n_classes() == 2);
  auto mods = net.modules();
  std::swap(mods[0], mods[1]);
  CHECK_THROWS_AS(ToyNet(4, HeadActivation::tanh, mods), ConfigError);
}
