#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "pdr/ridge.hpp"

using namespace pdr;
using namespace pdr::ridge;
using fixtures::kPi;

namespace {

constexpr double kDeg = kPi / 180.0;

// Max orientation error over blocks at least `margin` blocks from the border.
double max_orientation_error(const OrientationField& f, double expected, int margin) {
  double worst = 0.0;
  for (int by = margin; by < f.rows - margin; ++by)
    for (int bx = margin; bx < f.cols - margin; ++bx) {
      REQUIRE(f.defined(bx, by));
      worst = std::max(worst, orientation_difference(f.at(bx, by), expected));
    }
  return worst;
}

OrientationField constant_orientation(int cols, int rows, double theta) {
  OrientationField f(cols, rows, kBlockSize, theta);
  f.valid.assign(f.value.size(), 1);
  f.coherence.assign(f.value.size(), 1.0);
  return f;
}

PeriodMap constant_period(int cols, int rows, double p) {
  PeriodMap f(cols, rows, kBlockSize, p);
  f.valid.assign(f.value.size(), 1);
  return f;
}

double mean_interior(const Grid<double>& g, int margin) {
  double s = 0.0;
  int n = 0;
  for (int y = margin; y < g.height() - margin; ++y)
    for (int x = margin; x < g.width() - margin; ++x) {
      s += g(x, y);
      ++n;
    }
  return s / n;
}

}  // namespace

TEST_CASE("angle helpers") {
  CHECK(orientation_difference(2 * kDeg, 178 * kDeg) == doctest::Approx(4 * kDeg));
  CHECK(orientation_difference(10 * kDeg, 30 * kDeg) == doctest::Approx(20 * kDeg));
  CHECK(wrap_phase(kPi) == doctest::Approx(kPi));
  CHECK(wrap_phase(-kPi) == doctest::Approx(kPi));
  CHECK(wrap_phase(3 * kPi / 2) == doctest::Approx(-kPi / 2));
}

TEST_CASE("estimate_orientation") {
  SUBCASE("vertical ridges") {
    const auto f = estimate_orientation(fixtures::sinusoid(96, 96, 9.0));
    CHECK(max_orientation_error(f, kPi / 2, 1) < 3 * kDeg);
  }
  SUBCASE("rotated by 30 degrees") {
    const auto f = estimate_orientation(fixtures::sinusoid(96, 96, 9.0, 30 * kDeg));
    CHECK(max_orientation_error(f, kPi / 2 + 30 * kDeg, 1) < 3 * kDeg);
  }
  SUBCASE("equivariance over several angles") {
    for (double a : {-70.0, -25.0, 5.0, 47.0, 88.0}) {
      const auto f = estimate_orientation(fixtures::sinusoid(96, 96, 10.0, a * kDeg));
      CHECK(max_orientation_error(f, kPi / 2 + a * kDeg, 1) < 3 * kDeg);
    }
  }
  SUBCASE("flat image is undefined everywhere") {
    const auto f = estimate_orientation(Image(64, 64, 90.0));
    for (auto v : f.valid) CHECK(v == 0);
  }
  SUBCASE("values live in [0, pi)") {
    const auto f = estimate_orientation(fixtures::sinusoid(64, 64, 8.0, 91 * kDeg));
    for (double t : f.value) CHECK((t >= 0.0 && t < kPi));
  }
  CHECK_THROWS_AS(estimate_orientation(Image(16, 64)), ImageError);
}

TEST_CASE("estimate_period") {
  for (double p : {9.0, 12.0}) {
    const Image img = fixtures::sinusoid(128, 128, p, 20 * kDeg);
    const auto o = estimate_orientation(img);
    const auto per = estimate_period(img, o);
    for (int by = 2; by < per.rows - 2; ++by)
      for (int bx = 2; bx < per.cols - 2; ++bx) {
        REQUIRE(per.defined(bx, by));
        CHECK(per.at(bx, by) == doctest::Approx(p).epsilon(0.5 / p));
      }
  }
  SUBCASE("flat image") {
    const Image flat(64, 64, 100.0);
    const auto per = estimate_period(flat, estimate_orientation(flat));
    for (auto v : per.valid) CHECK(v == 0);
  }
}

TEST_CASE("segment_mask") {
  SUBCASE("flat") { CHECK(count(segment_mask(Image(64, 64, 200.0))) == 0); }
  SUBCASE("full frame of ridges") {
    const Mask m = segment_mask(fixtures::sinusoid(96, 96, 9.0, 0.3));
    int fg = 0, n = 0;
    for (int by = 1; by < 11; ++by)
      for (int bx = 1; bx < 11; ++bx) {
        fg += m(bx * 8, by * 8) ? 1 : 0;
        ++n;
      }
    CHECK(fg >= 0.95 * n);
  }
  SUBCASE("half ridges, half flat") {
    Image img = fixtures::sinusoid(96, 96, 9.0, 0.4);
    for (int y = 0; y < 96; ++y)
      for (int x = 48; x < 96; ++x) img(x, y) = 128.0;
    const Mask m = segment_mask(img);
    for (int by = 1; by < 11; ++by) {
      for (int bx = 0; bx < 12; ++bx) {
        const bool fg = m(bx * 8 + 4, by * 8 + 4) != 0;
        if (bx <= 4) CHECK(fg);   // ridge half, up to one block from the edge
        if (bx >= 7) CHECK(!fg);  // flat half, beyond one block
      }
    }
  }
}

TEST_CASE("gabor_kernel") {
  const auto k = gabor_kernel(0.0, 1.0 / 9.0, 4.0, 4.0, 17);
  CHECK(k.re(0, 0) == 1.0);
  CHECK(k.im(0, 0) == 0.0);
  for (int u = 1; u <= 8; ++u) {
    CHECK(k.im(u, 0) == doctest::Approx(-k.im(-u, 0)).epsilon(1e-15));
    CHECK(k.re(u, 0) == doctest::Approx(k.re(-u, 0)).epsilon(1e-15));
  }
  // exp(-4.5^2 / 32) * cos(pi)
  CHECK(gabor_value(0.0, 1.0 / 9.0, 4.0, 4.0, 4.5, 0.0).real() ==
        doctest::Approx(-std::exp(-4.5 * 4.5 / 32.0)).epsilon(1e-12));
  CHECK(gabor_value(0.0, 1.0 / 9.0, 4.0, 4.0, 4.5, 0.0).real() == doctest::Approx(-0.531).epsilon(1e-3));

  SUBCASE("symmetry along the rotated axis for arbitrary theta") {
    const auto r = gabor_kernel(0.7, 0.1, 5.0, 3.0, 21);
    for (int v = -10; v <= 10; ++v)
      for (int u = -10; u <= 10; ++u) {
        REQUIRE(std::fabs(r.re(u, v) - r.re(-u, -v)) < 1e-15);
        REQUIRE(std::fabs(r.im(u, v) + r.im(-u, -v)) < 1e-15);
      }
  }
  CHECK_THROWS(gabor_kernel(0.0, 0.1, 4, 4, 8));
  CHECK_THROWS(gabor_kernel(0.0, 0.0, 4, 4, 9));
}

TEST_CASE("enhance_and_phase") {
  const int n = 96;
  const Image img = fixtures::sinusoid(n, n, 9.0);
  const auto o = constant_orientation(12, 12, kPi / 2);
  const auto p = constant_period(12, 12, 9.0);
  const Mask full(n, n, 1);
  const auto r = enhance_and_phase(img, o, p, full);

  SUBCASE("phase advances 2 pi / 9 per pixel along the normal") {
    double worst = 0.0;
    for (int y = 16; y < 80; ++y)
      for (int x = 16; x < 79; ++x) {
        const double slope = wrap_phase(r.phase(x + 1, y) - r.phase(x, y));
        worst = std::max(worst, std::fabs(slope - 2 * kPi / 9));
      }
    CHECK(worst < 0.05 * 2 * kPi / 9);
  }
  SUBCASE("enhanced image is a normalized cosine") {
    for (int x = 16; x < 80; ++x) {
      const double expected = std::sqrt(2.0) * std::cos(2 * kPi * x / 9.0);
      CHECK(r.enhanced(x, 40) == doctest::Approx(expected).epsilon(0.08 / std::sqrt(2.0)).scale(1.0));
    }
  }
  SUBCASE("deterministic") {
    const auto again = enhance_and_phase(img, o, p, full);
    CHECK(again.enhanced == r.enhanced);
    CHECK(again.phase == r.phase);
  }
  SUBCASE("shift by 2 px") {
    const Image shifted = fixtures::sinusoid(n, n, 9.0, 0.0, 2.0);
    const auto rs = enhance_and_phase(shifted, o, p, full);
    Grid<double> d(n, n);
    for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = wrap_phase(r.phase.data()[i] - rs.phase.data()[i]);
    CHECK(std::fabs(mean_interior(d, 16) - 2 * kPi * 2 / 9) < 0.2);
  }
  SUBCASE("integer translation consistency") {
    const Image rich = fixtures::sinusoid(n, n, 11.0, 0.5);
    const auto o2 = constant_orientation(12, 12, 0.5 + kPi / 2);
    const auto p2 = constant_period(12, 12, 11.0);
    Image moved(n, n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) moved(x, y) = rich.clamped(x - 3, y - 2);
    const auto a = enhance_and_phase(rich, o2, p2, full);
    const auto b = enhance_and_phase(moved, o2, p2, full);
    for (int y = 24; y < 72; ++y)
      for (int x = 24; x < 72; ++x) {
        REQUIRE(b.phase(x, y) == doctest::Approx(a.phase(x - 3, y - 2)).epsilon(1e-9));
        REQUIRE(b.enhanced(x, y) == doctest::Approx(a.enhanced(x - 3, y - 2)).epsilon(0.05).scale(1.0));
      }
  }
  SUBCASE("values stay in range and zero outside the mask") {
    Mask half(n, n, 0);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n / 2; ++x) half(x, y) = 1;
    const auto h = enhance_and_phase(img, o, p, half);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        REQUIRE(h.phase(x, y) > -kPi);
        REQUIRE(h.phase(x, y) <= kPi);
        REQUIRE(std::fabs(h.enhanced(x, y)) <= 3.0);
        if (x >= n / 2) {
          REQUIRE(h.phase(x, y) == 0.0);
          REQUIRE(h.enhanced(x, y) == 0.0);
        }
      }
  }
  SUBCASE("undefined block under the mask") {
    auto bad = o;
    bad.valid[bad.index(3, 3)] = 0;
    CHECK_THROWS_AS(enhance_and_phase(img, bad, p, full), ImageError);
  }
}

TEST_CASE("preprocess_pair") {
  const int n = 96;
  const Image a = fixtures::sinusoid(n, n, 9.0, 0.2);
  SUBCASE("identical pair") {
    const auto pp = preprocess_pair(a, a);
    CHECK(!pp.empty_overlap);
    for (double v : pp.psi.data()) REQUIRE(v == 0.0);
    CHECK(pp.enh_input == pp.enh_ref);
  }
  SUBCASE("reference shifted 2 px along the normal") {
    const Image r = fixtures::sinusoid(n, n, 9.0, 0.2, 2.0);
    const auto pp = preprocess_pair(a, r);
    CHECK(std::fabs(mean_interior(pp.psi, 16) - 2 * kPi * 2 / 9) < 0.2);
    const auto rev = preprocess_pair(r, a);
    for (std::size_t i = 0; i < pp.psi.size(); ++i) {
      if (!pp.mask_input.data()[i] || !pp.mask_ref.data()[i]) continue;
      REQUIRE(wrap_phase(pp.psi.data()[i] + rev.psi.data()[i]) == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
    }
  }
  SUBCASE("disjoint masks") {
    Mask left(n, n, 0), right(n, n, 0);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) (x < n / 2 ? left : right)(x, y) = 1;
    const auto pp = preprocess_pair(a, a, left, right);
    CHECK(pp.empty_overlap);
    for (double v : pp.psi.data()) REQUIRE(v == 0.0);
    for (int y = 0; y < n; ++y)
      for (int x = n / 2; x < n; ++x) REQUIRE(pp.enh_input(x, y) == 0.0);
  }
}

TEST_CASE("block grid text format") {
  OrientationField f(3, 2, 8);
  f.coherence.assign(6, 0.0);
  f.at(0, 0) = kPi / 4;
  f.valid[0] = 1;
  f.at(2, 1) = 100 * kDeg;
  f.valid[f.index(2, 1)] = 1;
  std::stringstream ss;
  write_orientation(ss, f);
  CHECK(ss.str() == "45.000 - -\n- - 100.000\n");
  const auto back = read_orientation(ss);
  CHECK(back.cols == 3);
  CHECK(back.rows == 2);
  CHECK(back.at(0, 0) == doctest::Approx(kPi / 4));
  CHECK(!back.defined(1, 0));
}
