#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fixtures.hpp"
#include "pdr/synth.hpp"

using namespace pdr;
using namespace pdr::synth;
namespace fs = std::filesystem;

namespace {

double max_abs(const Grid<double>& g) {
  double m = 0.0;
  for (double v : g.data()) m = std::max(m, std::fabs(v));
  return m;
}

const std::vector<Augment> kAll = {Augment::Flip, Augment::Rot90, Augment::Rot180, Augment::Rot270,
                                   Augment::Swap};

}  // namespace

TEST_CASE("mix_seed") {
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(mix_seed(0, 0) != 0);
}

TEST_CASE("phantom") {
  PhantomParams p;
  p.width = 128;
  p.height = 160;
  const Phantom a = make_phantom(p, 5);
  CHECK(a.image.width() == 128);
  CHECK(a.image.height() == 160);
  CHECK(a.image == make_phantom(p, 5).image);
  CHECK_FALSE(a.image == make_phantom(p, 6).image);

  std::size_t fg = 0;
  double lo = 255, hi = 0;
  for (int y = 0; y < 160; ++y)
    for (int x = 0; x < 128; ++x) {
      const double v = a.image(x, y);
      CHECK(v == std::round(v));
      if (a.mask(x, y)) {
        ++fg;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      } else {
        CHECK(v == kFill);
      }
    }
  CHECK(fg > 0.4 * 128 * 160);
  CHECK(fg < 128 * 160);
  CHECK(hi - lo > 80);  // real ridge contrast

  p.finger_mask = false;
  const Phantom full = make_phantom(p, 5);
  for (auto m : full.mask.data()) CHECK(m == 1);

  const Phantom crop = make_training_phantom(64, 9);
  CHECK(crop.image.width() == 64);
  CHECK(crop.image == make_training_phantom(64, 9).image);

  p.width = 4;
  CHECK_THROWS_AS(make_phantom(p, 1), SynthError);
}

TEST_CASE("random_tps_field") {
  SUBCASE("magnitude 0 is the zero field") {
    const auto d = random_tps_field(40, 40, 0.0, 4, 3);
    CHECK(max_abs(d.dx) == 0.0);
    CHECK(max_abs(d.dy) == 0.0);
  }
  SUBCASE("bounded, no folds, deterministic") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      const auto d = random_tps_field(64, 64, 12.0, 4, s);
      CHECK(max_abs(d.dx) <= 12.0);
      CHECK(max_abs(d.dy) <= 12.0);
      const auto [jlo, jhi] = jacobian_range(d);
      CHECK(jlo >= kMinJacobian);
      CHECK(jhi <= kMaxJacobian);
      CHECK(d == random_tps_field(64, 64, 12.0, 4, s));
    }
    CHECK_FALSE(random_tps_field(64, 64, 12.0, 4, 1) == random_tps_field(64, 64, 12.0, 4, 2));
  }
  SUBCASE("smooth") {
    const auto d = random_tps_field(64, 64, 12.0, 4, 7);
    const double m = std::max(max_abs(d.dx), max_abs(d.dy));
    CHECK(m > 1.0);
    // Laplacian of a smooth field is tiny next to its amplitude.
    CHECK(max_abs(laplacian(d.dx)) < m / 2);
    CHECK(max_abs(laplacian(d.dy)) < m / 2);
  }
  SUBCASE("jacobian_range of analytic fields") {
    DisplacementField d(20, 20);
    CHECK(jacobian_range(d).first == doctest::Approx(1.0));
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 20; ++x) d.dx(x, y) = 0.5 * x;  // stretch 1.5 along x
    CHECK(jacobian_range(d).first == doctest::Approx(1.5));
    CHECK(jacobian_range(d).second == doctest::Approx(1.5));
  }
  SUBCASE("bad arguments") {
    CHECK_THROWS_AS(random_tps_field(64, 64, 31.0, 4, 1), SynthError);
    CHECK_THROWS_AS(random_tps_field(64, 64, -1.0, 4, 1), SynthError);
    CHECK_THROWS_AS(random_tps_field(64, 64, 5.0, 2, 1), SynthError);
  }
}

TEST_CASE("synthesize_pair") {
  const Phantom base = make_training_phantom(48, 4);
  SUBCASE("zero field") {
    const TrainSample s = synthesize_pair(base.image, DisplacementField(48, 48), base.mask);
    CHECK(s.Iprime == base.image);
    CHECK(max_abs(s.Fprime.dx) == 0.0);
    CHECK(s.mask_prime == base.mask);
    CHECK(consistency_error(s) == 0.0);
  }
  SUBCASE("constant integer field is a translation") {
    const DisplacementField d = fixtures::constant_field(48, 48, 5.0, 0.0);
    const TrainSample s = synthesize_pair(base.image, d, base.mask);
    CHECK(s.F == d);
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x + 5 < 48; ++x) {
        CHECK(s.Iprime(x + 5, y) == base.image(x, y));
        CHECK(s.Fprime.dx(x + 5, y) == -5.0);
        CHECK(s.Fprime.dy(x + 5, y) == 0.0);
      }
    // Columns 0..3 are never reached; column 4 is the one hole-fill pass.
    for (int y = 0; y < 48; ++y) {
      CHECK(s.Iprime(0, y) == kFill);
      CHECK(s.mask_prime(0, y) == 0);
    }
    CHECK(consistency_error(s) < 1e-12);
  }
  SUBCASE("F' is -D at the scattered locations") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const TrainSample s = generate_sample(64, 12.0, 4, seed);
      double worst = 0.0;
      for (int y = 4; y < 60; ++y)
        for (int x = 4; x < 60; ++x) {
          const double tx = x + s.F.dx(x, y), ty = y + s.F.dy(x, y);
          if (tx < 2 || ty < 2 || tx > 61 || ty > 61) continue;
          const double ex = bilinear_sample(s.Fprime.dx, tx, ty) + s.F.dx(x, y);
          const double ey = bilinear_sample(s.Fprime.dy, tx, ty) + s.F.dy(x, y);
          worst = std::max(worst, std::hypot(ex, ey));
        }
      CHECK(worst <= 0.5);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(synthesize_pair(base.image, DisplacementField(40, 48), base.mask), SynthError);
    CHECK_THROWS_AS(synthesize_pair(base.image, fixtures::constant_field(48, 48, 31.0, 0.0), base.mask),
                    SynthError);
  }
}

TEST_CASE("consistency within 3 gray levels, under every augmentation") {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const TrainSample s = generate_sample(64, 12.0, 4, seed);
    CHECK(consistency_error(s) <= 3.0);
    for (Augment a : kAll) {
      CAPTURE(to_string(a));
      CHECK(consistency_error(augment(s, a)) <= 3.0);
    }
    // Region must be a real part of the frame, not a sliver.
    std::size_t n = 0;
    for (auto m : consistency_region(s).data()) n += m;
    CHECK(n > 64 * 64 / 3);
  }
}

TEST_CASE("augmentations") {
  const TrainSample s = generate_sample(48, 10.0, 4, 3);
  auto same = [](const TrainSample& a, const TrainSample& b) {
    return a.I == b.I && a.Iprime == b.Iprime && a.F == b.F && a.Fprime == b.Fprime && a.mask == b.mask &&
           a.mask_prime == b.mask_prime;
  };
  CHECK(same(augment(augment(s, Augment::Flip), Augment::Flip), s));
  TrainSample r = s;
  for (int i = 0; i < 4; ++i) r = augment(r, Augment::Rot90);
  CHECK(same(r, s));
  CHECK(same(augment(augment(s, Augment::Swap), Augment::Swap), s));
  CHECK(same(augment(s, Augment::Rot180), augment(augment(s, Augment::Rot90), Augment::Rot90)));
  CHECK(same(augment(s, Augment::Rot270), augment(augment(s, Augment::Rot180), Augment::Rot90)));

  const TrainSample f = augment(s, Augment::Flip);
  CHECK(f.I(0, 5) == s.I(47, 5));
  CHECK(f.F.dx(0, 5) == -s.F.dx(47, 5));
  CHECK(f.F.dy(0, 5) == s.F.dy(47, 5));

  // Old (x, y) -> (H-1-y, x); (dx, dy) -> (-dy, dx).
  const TrainSample q = augment(s, Augment::Rot90);
  CHECK(q.I(47 - 7, 3) == s.I(3, 7));
  CHECK(q.F.dx(47 - 7, 3) == -s.F.dy(3, 7));
  CHECK(q.F.dy(47 - 7, 3) == s.F.dx(3, 7));

  const TrainSample w = augment(s, Augment::Swap);
  CHECK(w.I == s.Iprime);
  CHECK(w.F == s.Fprime);

  for (Augment a : kAll) CHECK(parse_augment(to_string(a)) == a);
  CHECK_THROWS_AS(parse_augment("shear"), SynthError);
  CHECK_THROWS_AS(parse_augment(""), SynthError);
}

TEST_CASE("random_augment draws every flip / rotation / swap combination") {
  const TrainSample s = generate_sample(32, 8.0, 4, 5);
  auto same = [](const TrainSample& a, const TrainSample& b) {
    return a.I == b.I && a.Iprime == b.Iprime && a.F == b.F && a.mask == b.mask && a.mask_prime == b.mask_prime;
  };
  // The 16 compositions written out by hand.
  std::vector<TrainSample> combos;
  for (int swap = 0; swap < 2; ++swap)
    for (int flip = 0; flip < 2; ++flip)
      for (int rot = 0; rot < 4; ++rot) {
        TrainSample c = flip ? augment(s, Augment::Flip) : s;
        static const Augment rots[] = {Augment::Rot90, Augment::Rot180, Augment::Rot270};
        if (rot) c = augment(c, rots[rot - 1]);
        if (swap) c = augment(c, Augment::Swap);
        combos.push_back(c);
      }
  std::vector<int> hits(combos.size(), 0);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const TrainSample a = random_augment(s, seed);
    CHECK(same(a, random_augment(s, seed)));
    int found = -1;
    for (std::size_t k = 0; k < combos.size() && found < 0; ++k)
      if (same(a, combos[k])) found = static_cast<int>(k);
    REQUIRE(found >= 0);
    ++hits[found];
  }
  for (int h : hits) CHECK(h > 0);
}

TEST_CASE("consistency_error needs a region") {
  TrainSample s = generate_sample(32, 5.0, 3, 1);
  s.mask = Mask(32, 32, 0);
  CHECK_THROWS_AS(consistency_error(s), SynthError);
}

TEST_CASE("dataset round trip") {
  const fs::path root = fs::temp_directory_path() / "pdr_test_synth_ds";
  fs::remove_all(root);
  DatasetSpec spec;
  spec.count = 3;
  spec.size = 32;
  spec.magnitude = 6.0;
  spec.seed = 11;
  const auto manifest = write_dataset(root.string(), spec);
  CHECK(manifest["samples"].size() == 3);
  CHECK(read_manifest(root.string()) == manifest);
  CHECK(fs::exists(root / "000002" / "maskprime.pgm"));

  const auto data = read_dataset(root.string());
  REQUIRE(data.size() == 3);
  const std::uint64_t s1 = manifest["samples"][1]["seed"].get<std::uint64_t>();
  const TrainSample ref = generate_sample(32, 6.0, 4, s1);
  CHECK(data[1].I == ref.I);
  // Fields are stored as float32.
  for (std::size_t i = 0; i < ref.F.dx.size(); ++i) {
    CHECK(data[1].F.dx.data()[i] == static_cast<float>(ref.F.dx.data()[i]));
    CHECK(data[1].Fprime.dy.data()[i] == static_cast<float>(ref.Fprime.dy.data()[i]));
  }
  CHECK(data[1].mask_prime == ref.mask_prime);
  for (std::size_t i = 0; i < ref.Iprime.size(); ++i)
    CHECK(std::fabs(data[1].Iprime.data()[i] - ref.Iprime.data()[i]) <= 0.5);

  // Same spec, same bytes.
  const fs::path again = fs::temp_directory_path() / "pdr_test_synth_ds2";
  fs::remove_all(again);
  write_dataset(again.string(), spec);
  CHECK(read_dataset(again.string())[2].Iprime == data[2].Iprime);

  CHECK_THROWS_AS(read_manifest((root / "nope").string()), SynthError);
  fs::remove_all(root);
  fs::remove_all(again);
}
