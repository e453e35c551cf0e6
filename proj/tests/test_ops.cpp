// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "gmmoe/ops.hpp"
#include "support/test_util.hpp"

using namespace gmmoe;
using namespace gmmoe::testing;

namespace {

Var<double> leaf(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  return Var<double>(random_tensor<double>(s, seed, lo, hi), true);
}

}  // namespace

TEST_CASE("conv2d matches a direct-loop oracle") {
  struct Case {
    Index cin, cout, k, stride, pad, dil, groups;
    bool bias;
  };
  const Case cases[] = {{3, 5, 3, 1, 1, 1, 1, true},  {4, 4, 3, 1, 1, 1, 4, true},  {4, 6, 1, 1, 0, 1, 1, false},
                        {2, 3, 3, 2, 1, 1, 1, true},  {3, 3, 3, 1, 2, 2, 1, true},  {3, 2, 5, 1, 2, 1, 1, true},
                        {4, 8, 3, 1, 3, 3, 2, false}, {2, 2, 7, 1, 3, 1, 1, true},  {3, 4, 3, 2, 0, 1, 1, true}};
  std::uint64_t seed = 1;
  for (const Case& c : cases) {
    CAPTURE(c.k);
    CAPTURE(c.stride);
    CAPTURE(c.dil);
    CAPTURE(c.groups);
    const auto x = random_tensor<double>(Shape{2, c.cin, 9, 7}, seed++);
    const auto w = random_tensor<double>(Shape{c.cout, c.cin / c.groups, c.k, c.k}, seed++);
    const auto b = random_tensor<double>(Shape{1, c.cout, 1, 1}, seed++);
    const Var<double> bias = c.bias ? Var<double>(b) : Var<double>();
    const auto got = conv2d(Var<double>(x), Var<double>(w), bias, Conv2dOptions{c.stride, c.pad, c.dil, c.groups});
    const auto want = naive_conv2d(x, w, c.bias ? &b : nullptr, c.stride, c.pad, c.dil, c.groups);
    REQUIRE(got.shape() == want.shape());
    CHECK(max_abs_diff(got.value(), want) < 1e-12);
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  const Conv2dOptions configs[] = {{1, 1, 1, 1}, {2, 1, 1, 1}, {1, 2, 2, 1}, {1, 1, 1, 2}};
  std::uint64_t seed = 10;
  for (const auto& o : configs) {
    auto x = leaf(Shape{2, 4, 6, 5}, seed++);
    auto w = leaf(Shape{4, 4 / o.groups, 3, 3}, seed++);
    auto b = leaf(Shape{1, 4, 1, 1}, seed++);
    const auto r = check_gradients({{"x", x}, {"w", w}, {"b", b}}, [&] { return probe(conv2d(x, w, b, o)); });
    CHECK_MESSAGE(r.max_rel_error <= 1e-6, r.worst);
  }
}

TEST_CASE("conv2d rejects inconsistent shapes") {
  const Var<double> x(Tensor<double>(Shape{1, 3, 4, 4}));
  CHECK_THROWS_AS(conv2d(x, Var<double>(Tensor<double>(Shape{2, 2, 3, 3})), Var<double>()), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Var<double>(Tensor<double>(Shape{2, 3, 7, 7})), Var<double>()), ShapeError);
}

TEST_CASE("pixel_unshuffle and pixel_shuffle") {
  const auto x = random_tensor<double>(Shape{2, 3, 8, 8}, 5);
  const Var<double> xv(x);

  SUBCASE("shapes") {
    CHECK(pixel_unshuffle(Var<double>(Tensor<double>(Shape{1, 3, 8, 8})), 2).shape() == Shape{1, 12, 4, 4});
    CHECK(pixel_shuffle(Var<double>(Tensor<double>(Shape{1, 12, 4, 4})), 2).shape() == Shape{1, 3, 8, 8});
  }
  SUBCASE("r = 1 is the identity") {
    CHECK(bit_equal(pixel_unshuffle(xv, 1).value(), x));
    CHECK(bit_equal(pixel_shuffle(xv, 1).value(), x));
  }
  SUBCASE("channel layout c * r^2 + i * r + j") {
    const auto u = pixel_unshuffle(xv, 2).value();
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < 2; ++j) CHECK(u(1, c * 4 + i * 2 + j, 3, 1) == x(1, c, 6 + i, 2 + j));
  }
  SUBCASE("round trips are exact") {
    for (Index r : {1, 2, 4}) {
      CHECK(bit_equal(pixel_shuffle(pixel_unshuffle(xv, r), r).value(), x));
    }
    const auto y = random_tensor<double>(Shape{1, 12, 3, 5}, 6);
    CHECK(bit_equal(pixel_unshuffle(pixel_shuffle(Var<double>(y), 2), 2).value(), y));
  }
  SUBCASE("indivisible shapes") {
    CHECK_THROWS_AS(pixel_unshuffle(Var<double>(Tensor<double>(Shape{1, 3, 7, 8})), 2), ShapeError);
    CHECK_THROWS_AS(pixel_shuffle(Var<double>(Tensor<double>(Shape{1, 6, 4, 4})), 2), ShapeError);
  }
  SUBCASE("gradients") {
    auto a = leaf(Shape{1, 2, 4, 6}, 7);
    auto b = leaf(Shape{1, 8, 2, 3}, 8);
    CHECK(check_gradients({{"a", a}}, [&] { return probe(pixel_unshuffle(a, 2)); }).max_rel_error <= 1e-8);
    CHECK(check_gradients({{"b", b}}, [&] { return probe(pixel_shuffle(b, 2)); }).max_rel_error <= 1e-8);
  }
}

TEST_CASE("bilinear 2x upsampling") {
  SUBCASE("midpoint between columns 0 and 1") {
    Tensor<double> x(Shape{1, 1, 2, 2});
    x(0, 0, 0, 1) = 1.0;
    x(0, 0, 1, 1) = 1.0;
    const auto y = upsample_bilinear2x(Var<double>(x), 4, 4).value();
    for (Index r = 0; r < 4; ++r) {
      CHECK(y(0, 0, r, 0) == 0.0);
      CHECK(y(0, 0, r, 1) == 0.5);
      CHECK(y(0, 0, r, 2) == 1.0);
      CHECK(y(0, 0, r, 3) == 1.0);
    }
  }
  SUBCASE("constants are preserved") {
    const auto y = upsample_bilinear2x(Var<double>(Tensor<double>(Shape{2, 3, 3, 5}, 0.37)), 6, 9).value();
    CHECK(y.shape() == Shape{2, 3, 6, 9});
    CHECK(max_abs_diff(y, Tensor<double>(y.shape(), 0.37)) < 1e-15);
  }
  SUBCASE("gradients") {
    auto x = leaf(Shape{1, 2, 3, 4}, 9);
    const auto r = check_gradients({{"x", x}}, [&] { return probe(upsample_bilinear2x(x, 5, 8)); });
    CHECK(r.max_rel_error <= 1e-8);
  }
}

TEST_CASE("reflect padding and crop") {
  CHECK(reflect_index(-1, 5) == 1);
  CHECK(reflect_index(5, 5) == 3);
  CHECK(reflect_index(6, 5) == 2);
  CHECK(reflect_index(9, 3) == 1);
  CHECK(reflect_index(0, 1) == 0);
  const auto x = random_tensor<double>(Shape{1, 2, 5, 3}, 11);
  const auto p = reflect_pad(Var<double>(x), 3, 4);
  CHECK(p.shape() == Shape{1, 2, 8, 7});
  CHECK(p.value()(0, 1, 5, 2) == x(0, 1, 3, 2));
  CHECK(p.value()(0, 0, 2, 3) == x(0, 0, 2, 1));
  CHECK(bit_equal(crop(p, 5, 3).value(), x));
  auto v = leaf(Shape{1, 2, 3, 3}, 12);
  CHECK(check_gradients({{"v", v}}, [&] { return probe(crop(reflect_pad(v, 4, 2), 6, 4)); }).max_rel_error <=
        1e-8);
}

TEST_CASE("softmax over channels") {
  SUBCASE("equal logits") {
    const auto s = softmax_channels(Var<double>(Tensor<double>(Shape{2, 3, 1, 1}, 0.7))).value();
    for (Index i = 0; i < s.size(); ++i) CHECK(s[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("closed form (ln 2, 0, 0)") {
    Tensor<double> l(Shape{1, 3, 1, 1});
    l[0] = std::log(2.0);
    const auto s = softmax_channels(Var<double>(l)).value();
    CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s[1] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(s[2] == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("masked channels get exactly zero weight") {
    const auto l = random_tensor<double>(Shape{4, 3, 1, 1}, 13, -5, 5);
    const auto s = softmax_channels(Var<double>(l), {true, false, true}).value();
    for (Index n = 0; n < 4; ++n) {
      CHECK(s(n, 1, 0, 0) == 0.0);
      CHECK(s(n, 0, 0, 0) + s(n, 2, 0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    }
    CHECK_THROWS_AS(softmax_channels(Var<double>(l), {false, false, false}), ShapeError);
  }
  SUBCASE("argmax is invariant to a constant shift of all logits") {
    Rng rng(14);
    for (int t = 0; t < 200; ++t) {
      Tensor<double> l(Shape{1, 3, 1, 1});
      for (Index i = 0; i < 3; ++i) l[i] = uniform(rng, -4, 4);
      Tensor<double> shifted = l;
      shifted.array() += uniform(rng, -50, 50);
      const auto a = softmax_channels(Var<double>(l)).value();
      const auto b = softmax_channels(Var<double>(shifted)).value();
      Index ia = 0, ib = 0;
      a.vec().maxCoeff(&ia);
      b.vec().maxCoeff(&ib);
      CHECK(ia == ib);
      CHECK(max_abs_diff(a, b) < 1e-12);
    }
  }
  SUBCASE("gradients") {
    auto l = leaf(Shape{2, 3, 2, 2}, 15, -2, 2);
    CHECK(check_gradients({{"l", l}}, [&] { return probe(softmax_channels(l)); }).max_rel_error <= 1e-7);
    CHECK(check_gradients({{"l", l}}, [&] { return probe(softmax_channels(l, {true, true, false})); })
              .max_rel_error <= 1e-7);
  }
}

TEST_CASE("convex_combine") {
  SUBCASE("scalar oracle 0.5*0.2 + 0.3*0.4 + 0.2*0.6 = 0.34") {
    const Var<double> xs[] = {Var<double>(Tensor<double>(Shape{1, 1, 1, 1}, 0.2)),
                              Var<double>(Tensor<double>(Shape{1, 1, 1, 1}, 0.4)),
                              Var<double>(Tensor<double>(Shape{1, 1, 1, 1}, 0.6))};
    Tensor<double> w(Shape{1, 3, 1, 1});
    w[0] = 0.5;
    w[1] = 0.3;
    w[2] = 0.2;
    const double oracle = 0.5 * 0.2 + 0.3 * 0.4 + 0.2 * 0.6;
    const double got = convex_combine<double>(xs, Var<double>(w)).value()[0];
    CHECK(std::abs(got - 0.34) <= 1e-12);
    CHECK(std::abs(got - oracle) <= 1e-12);
  }
  SUBCASE("one-hot weights select an input bit for bit") {
    const Var<float> xs[] = {Var<float>(random_tensor<float>(Shape{2, 3, 4, 4}, 16)),
                             Var<float>(random_tensor<float>(Shape{2, 3, 4, 4}, 17)),
                             Var<float>(random_tensor<float>(Shape{2, 3, 4, 4}, 18))};
    for (Index k = 0; k < 3; ++k) {
      Tensor<float> w(Shape{2, 3, 1, 1});
      w(0, k, 0, 0) = 1.0f;
      w(1, k, 0, 0) = 1.0f;
      CHECK(bit_equal(convex_combine<float>(xs, Var<float>(w)).value(), xs[k].value()));
    }
  }
  SUBCASE("identical inputs are returned exactly under any simplex weights") {
    const auto x = random_tensor<float>(Shape{3, 2, 5, 5}, 19);
    const Var<float> xs[] = {Var<float>(x), Var<float>(x), Var<float>(x)};
    Rng rng(20);
    for (int t = 0; t < 50; ++t) {
      Tensor<float> w(Shape{3, 3, 1, 1});
      for (Index n = 0; n < 3; ++n) {
        double a = uniform01(rng), b = uniform01(rng), c = uniform01(rng), s = a + b + c;
        w(n, 0, 0, 0) = float(a / s);
        w(n, 1, 0, 0) = float(b / s);
        w(n, 2, 0, 0) = float(c / s);
      }
      CHECK(bit_equal(convex_combine<float>(xs, Var<float>(w)).value(), x));
    }
  }
  SUBCASE("gradients") {
    auto a = leaf(Shape{2, 2, 3, 3}, 21), b = leaf(Shape{2, 2, 3, 3}, 22), c = leaf(Shape{2, 2, 3, 3}, 23);
    Tensor<double> wt(Shape{2, 3, 1, 1});
    const double ws[] = {0.5, 0.3, 0.2, 0.1, 0.25, 0.65};
    for (Index i = 0; i < 6; ++i) wt[i] = ws[i];
    auto w = Var<double>(wt, true);
    const auto r = check_gradients({{"a", a}, {"b", b}, {"c", c}, {"w", w}}, [&] {
      const Var<double> xs[] = {a, b, c};
      return probe(convex_combine<double>(xs, w));
    });
    CHECK_MESSAGE(r.max_rel_error <= 1e-7, r.worst);
  }
}

TEST_CASE("elementwise, pooling and reduction gradients") {
  auto x = leaf(Shape{2, 3, 5, 4}, 30);
  auto y = leaf(Shape{2, 3, 5, 4}, 31);
  auto row = leaf(Shape{2, 3, 1, 1}, 32);
  auto map = leaf(Shape{2, 1, 5, 4}, 33);
  struct Case {
    const char* name;
    std::function<Var<double>()> f;
  };
  const Case cases[] = {
      {"add", [&] { return probe(add(x, y)); }},
      {"add broadcast", [&] { return probe(add(x, row)); }},
      {"sub", [&] { return probe(sub(x, map)); }},
      {"mul", [&] { return probe(mul(x, y)); }},
      {"mul broadcast", [&] { return probe(mul(map, x)); }},
      {"scale", [&] { return probe(scale(x, 2.5)); }},
      {"sigmoid", [&] { return probe(sigmoid(x)); }},
      {"relu", [&] { return probe(relu(x)); }},
      {"clamp", [&] { return probe(clamp(x, -0.5, 0.5)); }},
      {"concat", [&] {
         const Var<double> parts[] = {x, map, y};
         return probe(concat_channels<double>(parts));
       }},
      {"slice", [&] { return probe(slice_channels(x, 1, 2)); }},
      {"gap", [&] { return probe(global_avg_pool(x)); }},
      {"gmp", [&] { return probe(global_max_pool(x)); }},
      {"channel_mean", [&] { return probe(channel_mean(x)); }},
      {"channel_max", [&] { return probe(channel_max(x)); }},
      {"max_pool", [&] { return probe(max_pool2d(x, 3, 1, 1)); }},
      {"max_pool stride 2", [&] { return probe(max_pool2d(x, 2, 2, 0)); }},
      {"sample_mean", [&] { return probe(sample_mean(mul(x, y))); }},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    const auto r = check_gradients({{"x", x}, {"y", y}, {"row", row}, {"map", map}}, c.f);
    CHECK_MESSAGE(r.max_rel_error <= 1e-6, r.worst);
  }
}

TEST_CASE("broadcast and pooling values") {
  const auto x = random_tensor<double>(Shape{1, 2, 3, 3}, 40);
  const auto gap = global_avg_pool(Var<double>(x)).value();
  CHECK(gap(0, 1, 0, 0) == doctest::Approx(x.planes(0, 1, 1).mean()));
  const auto mp = max_pool2d(Var<double>(x), 3, 1, 1).value();
  double m = -1e9;
  for (Index i = 0; i < 9; ++i) m = std::max(m, x.plane(0, 0)[i]);
  CHECK(mp(0, 0, 1, 1) == m);
  CHECK_THROWS_AS(add(Var<double>(x), Var<double>(Tensor<double>(Shape{1, 3, 3, 3}))), ShapeError);
  const auto s = sigmoid(Var<double>(Tensor<double>(Shape{1, 1, 1, 2}, 0.0))).value();
  CHECK(s[0] == 0.5);
  Tensor<double> extreme(Shape{1, 1, 1, 2});
  extreme[0] = -1000.0;
  extreme[1] = 1000.0;
  const auto se = sigmoid(Var<double>(extreme)).value();
  CHECK(se[0] >= 0.0);
  CHECK(se[1] <= 1.0);
  CHECK(se.all_finite());
}

TEST_CASE("graph bookkeeping") {
  SUBCASE("no graph is recorded under NoGradGuard") {
    auto x = leaf(Shape{1, 1, 2, 2}, 50);
    NoGradGuard guard;
    const auto y = sigmoid(x);
    CHECK_FALSE(y.requires_grad());
  }
  SUBCASE("leaf gradients accumulate across backward calls") {
    auto x = leaf(Shape{1, 1, 2, 2}, 51);
    backward(sum(x));
    backward(sum(x));
    CHECK(x.grad()[0] == 2.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }
  SUBCASE("a value reused along many paths gets the summed gradient") {
    auto x = leaf(Shape{1, 1, 1, 1}, 52);
    Var<double> acc = x;
    for (int i = 0; i < 2000; ++i) acc = add(acc, x);
    backward(acc);
    CHECK(x.grad()[0] == 2001.0);
  }
}
