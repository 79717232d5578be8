#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "pdr/nn.hpp"

using namespace pdr::nn;

namespace {

Tensor random_tensor(Shape s, unsigned seed, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(s.size());
  for (auto& x : v) x = u(rng);
  return Tensor::from(s, std::move(v), grad);
}

// Random projection turns any op output into a scalar with nontrivial gradients.
Tensor project(const Tensor& y, unsigned seed) {
  return sum(mul(y, random_tensor(y.shape(), seed, false)));
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

// Nested-loop convolution reference with zero padding.
std::vector<double> naive_conv(const Tensor& x, const Tensor& k, const Tensor& b, ConvSpec sp) {
  const Shape xs = x.shape(), ks = k.shape();
  const int oh = (xs.h + 2 * sp.padding - sp.dilation * (ks.h - 1) - 1) / sp.stride + 1;
  const int ow = (xs.w + 2 * sp.padding - sp.dilation * (ks.w - 1) - 1) / sp.stride + 1;
  std::vector<double> out;
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < ks.n; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = b.defined() ? b.data()[co] : 0.0;
          for (int ci = 0; ci < xs.c; ++ci)
            for (int ky = 0; ky < ks.h; ++ky)
              for (int kx = 0; kx < ks.w; ++kx) {
                const int iy = oy * sp.stride - sp.padding + ky * sp.dilation;
                const int ix = ox * sp.stride - sp.padding + kx * sp.dilation;
                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                acc += k.at(co, ci, ky, kx) * x.at(n, ci, iy, ix);
              }
          out.push_back(acc);
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d") {
  SUBCASE("1x1 identity") {
    const Tensor x = random_tensor({2, 3, 6, 5}, 1);
    Tensor k = Tensor::zeros({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) k.at(c, c, 0, 0) = 1.0;
    CHECK(conv2d(x, k, Tensor(), {}).data() == x.data());
  }
  SUBCASE("box filter on a constant") {
    const Tensor x = Tensor::full({1, 1, 7, 7}, 4.5);
    const Tensor k = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
    const Tensor y = conv2d(x, k, Tensor(), {});
    for (double v : y.data()) CHECK(v == doctest::Approx(4.5).epsilon(1e-14));
  }
  SUBCASE("stride 2 against the nested-loop reference") {
    const Tensor x = random_tensor({2, 3, 5, 5}, 2);
    const Tensor k = random_tensor({4, 3, 3, 3}, 3);
    const Tensor y = conv2d(x, k, Tensor(), {2, 1, 0});
    CHECK(y.shape() == Shape{2, 4, 2, 2});
    CHECK(max_abs_diff(y.data(), naive_conv(x, k, Tensor(), {2, 1, 0})) < 1e-10);
  }
  SUBCASE("random shapes, dilation, padding, bias") {
    std::mt19937 rng(4);
    for (int trial = 0; trial < 12; ++trial) {
      const Shape xs{1 + static_cast<int>(rng() % 2), 1 + static_cast<int>(rng() % 8),
                     6 + static_cast<int>(rng() % 11), 6 + static_cast<int>(rng() % 11)};
      const int kk = 1 + 2 * static_cast<int>(rng() % 2);
      const ConvSpec sp{1 + static_cast<int>(rng() % 2), 1 + static_cast<int>(rng() % 2),
                        static_cast<int>(rng() % 3)};
      const int co = 1 + static_cast<int>(rng() % 5);
      const Tensor x = random_tensor(xs, 10 + trial);
      const Tensor k = random_tensor({co, xs.c, kk, kk}, 40 + trial);
      const Tensor b = random_tensor({1, co, 1, 1}, 70 + trial);
      CHECK(max_abs_diff(conv2d(x, k, b, sp).data(), naive_conv(x, k, b, sp)) < 1e-10);
    }
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 5, 5}), Tensor::zeros({1, 3, 3, 3}), Tensor(), {}), NnError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor(), {}), NnError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 5, 5}), Tensor::zeros({2, 1, 3, 3}),
                           Tensor::zeros({1, 3, 1, 1}), {}),
                    NnError);
  }
}

TEST_CASE("batchnorm") {
  const Shape s{3, 4, 5, 6};
  // Wide spread so the eps term stays far below the 1e-6 variance tolerance.
  const Tensor x = random_tensor(s, 5, true, -30.0, 70.0);
  const Tensor one = Tensor::full({1, 4, 1, 1}, 1.0);
  const Tensor zero = Tensor::zeros({1, 4, 1, 1});
  Tensor rm = Tensor::zeros({1, 4, 1, 1});
  Tensor rv = Tensor::full({1, 4, 1, 1}, 1.0);

  const Tensor y = batchnorm(x, one, zero, rm, rv, BnMode::Train);
  const std::size_t hw = 30;
  for (int c = 0; c < 4; ++c) {
    // Two-pass reference statistics.
    double mu = 0.0, var = 0.0, ym = 0.0, yv = 0.0;
    for (int n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < hw; ++i) mu += x.data()[(n * 4 + c) * hw + i];
    mu /= 90.0;
    for (int n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < hw; ++i) var += std::pow(x.data()[(n * 4 + c) * hw + i] - mu, 2);
    var /= 90.0;
    for (int n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t k = (n * 4 + c) * hw + i;
        CHECK(std::fabs(y.data()[k] - (x.data()[k] - mu) / std::sqrt(var + kBnEps)) < 1e-10);
        ym += y.data()[k];
      }
    ym /= 90.0;
    for (int n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < hw; ++i) yv += std::pow(y.data()[(n * 4 + c) * hw + i] - ym, 2);
    yv /= 90.0;
    CHECK(std::fabs(ym) < 1e-6);
    CHECK(std::fabs(yv - 1.0) < 1e-6);
    CHECK(rm.data()[c] == doctest::Approx(0.1 * mu).epsilon(1e-12));
    CHECK(rv.data()[c] == doctest::Approx(0.9 + 0.1 * var).epsilon(1e-12));
  }

  SUBCASE("constant input normalizes to zero") {
    Tensor m2 = Tensor::zeros({1, 4, 1, 1}), v2 = Tensor::full({1, 4, 1, 1}, 1.0);
    const Tensor y0 = batchnorm(Tensor::full(s, 3.0), one, zero, m2, v2, BnMode::Train);
    for (double v : y0.data()) CHECK(v == 0.0);
  }
  SUBCASE("eval mode uses the running buffers") {
    const Tensor g = random_tensor({1, 4, 1, 1}, 6);
    const Tensor b = random_tensor({1, 4, 1, 1}, 7);
    const Tensor ye = batchnorm(x, g, b, rm, rv, BnMode::Eval);
    for (int c = 0; c < 4; ++c) {
      const double v = x.at(1, c, 2, 3);
      CHECK(ye.at(1, c, 2, 3) ==
            doctest::Approx(g.data()[c] * (v - rm.data()[c]) / std::sqrt(rv.data()[c] + kBnEps) + b.data()[c])
                .epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(batchnorm(Tensor::zeros({0, 4, 2, 2}), one, zero, rm, rv, BnMode::Train), NnError);
}

TEST_CASE("elementwise and layout ops") {
  const Tensor x = random_tensor({2, 3, 4, 4}, 8, false, 0.0, 1.0);
  const Tensor r = relu(scale(x, -1.0));
  for (double v : r.data()) CHECK(v == 0.0);

  const Tensor eq = Tensor::full({1, 50, 3, 2}, 0.7);
  const Tensor pe = softmax_channels(eq, 25);
  for (double v : pe.data()) CHECK(v == doctest::Approx(1.0 / 25).epsilon(1e-15));

  const Tensor logits = random_tensor({2, 50, 3, 3}, 9, false, -20.0, 20.0);
  const Tensor p = softmax_channels(logits, 25);
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < 2; ++g)
      for (int y = 0; y < 3; ++y)
        for (int xx = 0; xx < 3; ++xx) {
          double s = 0.0;
          for (int t = 0; t < 25; ++t) {
            const double v = p.at(n, g * 25 + t, y, xx);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            s += v;
          }
          CHECK(std::fabs(s - 1.0) < 1e-9);
        }
  CHECK_THROWS_AS(softmax_channels(logits, 7), NnError);

  const Tensor c = Tensor::full({1, 2, 3, 3}, -1.25);
  const Tensor pooled = avgpool_global(upsample_bilinear(c, 4));
  CHECK(pooled.shape() == Shape{1, 2, 1, 1});
  for (double v : pooled.data()) CHECK(v == -1.25);

  const Tensor cat = concat_channels({x, random_tensor({2, 1, 4, 4}, 10, false)});
  CHECK(cat.shape() == Shape{2, 4, 4, 4});
  CHECK(cat.at(1, 2, 3, 1) == x.at(1, 2, 3, 1));
  CHECK_THROWS_AS(concat_channels({x, Tensor::zeros({2, 1, 3, 4})}), NnError);
  CHECK_THROWS_AS(add(x, Tensor::zeros({2, 3, 4, 5})), NnError);

  const Tensor d = downsample_stride(x, 2);
  CHECK(d.shape() == Shape{2, 3, 2, 2});
  CHECK(d.at(1, 1, 1, 1) == x.at(1, 1, 2, 2));

  // A 1x1 map resizes to a constant plane.
  const Tensor one = Tensor::full({1, 1, 1, 1}, 2.5);
  const Tensor spread = resize_bilinear(one, 3, 5);
  for (double v : spread.data()) CHECK(v == 2.5);
}

TEST_CASE("backward basics") {
  const Tensor x = random_tensor({1, 2, 3, 3}, 11);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  const Tensor y = random_tensor({1, 2, 3, 3}, 12);
  backward(sum(relu(y)));
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.grad()[i] == (y.data()[i] > 0.0 ? 1.0 : 0.0));

  CHECK_THROWS_AS(backward(Tensor::zeros({1, 1, 1, 1})), NnError);
  CHECK_THROWS_AS(backward(relu(random_tensor({1, 1, 2, 2}, 13))), NnError);
}

TEST_CASE("grad_check on every differentiable op") {
  SUBCASE("quadratic") {
    const Tensor x = random_tensor({1, 1, 15, 15}, 20);
    CHECK(grad_check([&] { return sum(mul(x, x)); }, {x}) < 1e-8);
  }
  SUBCASE("conv2d + relu") {
    const Tensor x = random_tensor({2, 3, 9, 9}, 21);
    const Tensor k = random_tensor({4, 3, 3, 3}, 22);
    const Tensor b = random_tensor({1, 4, 1, 1}, 23);
    for (ConvSpec sp : {ConvSpec{1, 1, 1}, ConvSpec{2, 1, 1}, ConvSpec{1, 2, 2}}) {
      CHECK(grad_check([&] { return project(relu(conv2d(x, k, b, sp)), 24); }, {x, k, b}) < 1e-4);
    }
  }
  SUBCASE("batchnorm train and eval") {
    const Tensor x = random_tensor({2, 3, 4, 4}, 25, true, -2.0, 3.0);
    const Tensor g = random_tensor({1, 3, 1, 1}, 26, true, 0.5, 1.5);
    const Tensor b = random_tensor({1, 3, 1, 1}, 27);
    Tensor rm = Tensor::zeros({1, 3, 1, 1}), rv = Tensor::full({1, 3, 1, 1}, 1.0);
    CHECK(grad_check([&] { return project(batchnorm(x, g, b, rm, rv, BnMode::Train), 28); }, {x, g, b}) < 1e-4);
    CHECK(grad_check([&] { return project(batchnorm(x, g, b, rm, rv, BnMode::Eval), 29); }, {x, g, b}) < 1e-4);
  }
  SUBCASE("layout ops") {
    const Tensor a = random_tensor({2, 2, 6, 6}, 30);
    const Tensor b = random_tensor({2, 3, 6, 6}, 31);
    const Tensor c = random_tensor({2, 2, 6, 6}, 32);
    CHECK(grad_check([&] { return project(concat_channels({a, b}), 33); }, {a, b}) < 1e-4);
    CHECK(grad_check([&] { return project(add(a, scale(c, -0.7)), 34); }, {a, c}) < 1e-4);
    CHECK(grad_check([&] { return project(avgpool_global(b), 35); }, {b}) < 1e-4);
    CHECK(grad_check([&] { return project(upsample_bilinear(a, 2), 36); }, {a}) < 1e-4);
    CHECK(grad_check([&] { return project(resize_bilinear(b, 3, 3), 37); }, {b}) < 1e-4);
    CHECK(grad_check([&] { return project(resize_bilinear(avgpool_global(a), 6, 6), 38); }, {a}) < 1e-4);
    CHECK(grad_check([&] { return project(downsample_stride(b, 2), 39); }, {b}) < 1e-4);
  }
  SUBCASE("softmax") {
    const Tensor x = random_tensor({2, 50, 2, 2}, 40, true, -3.0, 3.0);
    CHECK(grad_check([&] { return project(softmax_channels(x, 25), 41); }, {x}) < 1e-4);
  }
  SUBCASE("a wrong gradient is caught") {
    const Tensor x = random_tensor({1, 1, 4, 4}, 42);
    auto bad = [&] {
      std::vector<double> v(x.size());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] * x.data()[i];
      return sum(make_op(x.shape(), v, {x}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.parents[0]->value[i];
      }));
    };
    CHECK(grad_check(bad, {x}) > 0.1);
  }
  SUBCASE("stencils across a relu kink are refined or skipped") {
    // 5e-5 sits inside the default h = 1e-4 but outside h / 10; 3e-6 is inside both.
    const Tensor x = Tensor::from({1, 1, 1, 4}, {5e-5, 3e-6, 0.7, -0.4}, true);
    const Tensor w = Tensor::from({1, 1, 1, 4}, {1.3, -0.8, 2.0, 0.5});
    GradCheckStats st;
    CHECK(grad_check([&] { return sum(mul(relu(x), w)); }, {x}, 1e-4, 200, 1, &st) < 1e-9);
    CHECK(st.checked == 3);
    CHECK(st.refined == 1);
    CHECK(st.skipped == 1);
  }
  SUBCASE("non-deterministic function") {
    const Tensor x = random_tensor({1, 1, 2, 2}, 43);
    int calls = 0;
    CHECK_THROWS_AS(grad_check([&] { return scale(sum(x), 1.0 + ++calls); }, {x}), NnError);
  }
}

TEST_CASE("sgd") {
  SUBCASE("lr = 0 leaves parameters unchanged") {
    ParamStore ps;
    Tensor& w = ps.add("w", {1, 1, 2, 2});
    w.data() = {1, 2, 3, 4};
    const auto before = w.data();
    backward(sum(mul(w, w)));
    Sgd(0.0, 0.9).step(ps);
    CHECK(w.data() == before);
  }
  SUBCASE("quadratic descent is monotone") {
    ParamStore ps;
    Tensor& w = ps.add("w", {1, 1, 1, 1});
    w.data()[0] = 3.0;
    // Heavy-ball stays overdamped (no overshoot) for momentum < (1 - sqrt(2 lr))^2.
    Sgd opt(0.01, 0.5);
    double prev = 9.0;
    int rises = 0;
    for (int i = 0; i < 100; ++i) {
      ps.zero_grad();
      const Tensor loss = sum(mul(w, w));
      if (loss.item() > prev) ++rises;
      prev = loss.item();
      backward(loss);
      opt.step(ps);
    }
    CHECK(rises == 0);
    CHECK(prev < 0.1);
  }
  SUBCASE("momentum 0 equals plain gradient descent") {
    ParamStore ps;
    Tensor& w = ps.add("w", {1, 1, 3, 1});
    w.data() = {0.3, -1.7, 2.2};
    std::vector<double> ref = w.data();
    Sgd opt(0.05, 0.0);
    for (int i = 0; i < 10; ++i) {
      ps.zero_grad();
      backward(sum(mul(w, w)));
      for (std::size_t k = 0; k < 3; ++k) ref[k] -= 0.05 * (ref[k] + ref[k]);
      opt.step(ps);
      CHECK(w.data() == ref);
    }
  }
  SUBCASE("missing gradient") {
    ParamStore ps;
    ps.add("w", {1, 1, 1, 1});
    CHECK_THROWS_AS(Sgd(0.1, 0.9).step(ps), NnError);
  }
}

TEST_CASE("ParamStore serialization") {
  ParamStore a;
  a.add("conv.k", {2, 1, 3, 3}).data() = random_tensor({2, 1, 3, 3}, 50).data();
  a.add("bn.mean", {1, 2, 1, 1}, false).data() = {0.5, -0.25};
  CHECK_THROWS_AS(a.add("conv.k", {1, 1, 1, 1}), NnError);
  CHECK(a.trainable_count() == 18);

  std::stringstream ss;
  a.save(ss);
  // magic + version + count, then per entry: name length, name, rank, 4 dims, data.
  CHECK(ss.str().size() == 12 + (4 + 6 + 4 + 16 + 18 * 8) + (4 + 7 + 4 + 16 + 2 * 8));
  CHECK(ss.str().substr(0, 4) == "PDRW");

  ParamStore b;
  b.add("conv.k", {2, 1, 3, 3});
  b.add("bn.mean", {1, 2, 1, 1}, false);
  b.load(ss);
  CHECK(b.get("conv.k").data() == a.get("conv.k").data());
  CHECK(b.get("bn.mean").data() == a.get("bn.mean").data());

  ParamStore c;
  c.add("conv.k", {2, 1, 5, 5});
  c.add("bn.mean", {1, 2, 1, 1}, false);
  std::stringstream again;
  a.save(again);
  CHECK_THROWS_AS(c.load(again), NnError);
  std::stringstream junk("nope");
  CHECK_THROWS_AS(b.load(junk), NnError);
}
