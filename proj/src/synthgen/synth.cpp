#include "pdr/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "pdr/imageio.hpp"
#include "pdr/ridge.hpp"
#include "pdr/tps.hpp"

namespace pdr::synth {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Singularity {
  double x, y;
};

// Core/delta orientation model: each core adds half its polar angle, each
// delta subtracts it. Returns the ridge direction mod pi.
double model_orientation(double x, double y, double base, const std::vector<Singularity>& cores,
                         const std::vector<Singularity>& deltas) {
  double a = base;
  for (const auto& c : cores) a += 0.5 * std::atan2(y - c.y, x - c.x);
  for (const auto& d : deltas) a -= 0.5 * std::atan2(y - d.y, x - d.x);
  a = std::fmod(a, kPi);
  return a < 0 ? a + kPi : a;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Phantom make_phantom(const PhantomParams& p, std::uint64_t seed) {
  if (p.width < 16 || p.height < 16) throw SynthError("phantom must be at least 16x16");
  if (p.cores < 0 || p.cores > 2) throw SynthError("phantom supports 0..2 cores");
  if (!(p.period_min >= ridge::kMinPeriod) || p.period_max < p.period_min || p.period_max > ridge::kMaxPeriod)
    throw SynthError("phantom period range out of bounds");
  const int w = p.width, h = p.height;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // Singularities: cores slightly above centre, deltas below and to the side.
  const double cx = w * (0.4 + 0.2 * u(rng));
  const double cy = h * (0.35 + 0.15 * u(rng));
  std::vector<Singularity> cores, deltas;
  if (p.cores == 1) {
    cores.push_back({cx, cy});
    const double side = u(rng) < 0.5 ? -1.0 : 1.0;
    deltas.push_back({cx + side * w * (0.2 + 0.15 * u(rng)), cy + h * (0.3 + 0.15 * u(rng))});
  } else if (p.cores == 2) {
    const double dy = h * (0.05 + 0.05 * u(rng));
    cores.push_back({cx - w * 0.03, cy - dy});
    cores.push_back({cx + w * 0.03, cy + dy});
    deltas.push_back({cx - w * (0.3 + 0.1 * u(rng)), cy + h * (0.35 + 0.1 * u(rng))});
    deltas.push_back({cx + w * (0.3 + 0.1 * u(rng)), cy + h * (0.35 + 0.1 * u(rng))});
  }
  const double base = (u(rng) - 0.5) * 0.3;

  // Slowly varying period.
  const double pmid = 0.5 * (p.period_min + p.period_max);
  const double pamp = 0.5 * (p.period_max - p.period_min);
  const double fx = (u(rng) - 0.5) / std::max(w, h), fy = (u(rng) - 0.5) / std::max(w, h);
  const double ph0 = 2 * kPi * u(rng);

  Grid<double> theta(w, h), period(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      theta(x, y) = model_orientation(x, y, base, cores, deltas);
      period(x, y) = pmid + pamp * std::sin(2 * kPi * (fx * x + fy * y) + ph0);
    }

  // Kernels are cached on a quantized (orientation, period) lattice.
  constexpr int kAngles = 48;
  constexpr double kPeriodStep = 0.25;
  std::map<std::pair<int, int>, ridge::GaborKernel> kernels;
  auto kernel_for = [&](double th, double per) -> const ridge::GaborKernel& {
    const int ai = static_cast<int>(std::lround(th / kPi * kAngles)) % kAngles;
    const int pi = static_cast<int>(std::lround(per / kPeriodStep));
    auto it = kernels.find({ai, pi});
    if (it == kernels.end()) {
      const double P = pi * kPeriodStep;
      const double normal = ai * kPi / kAngles - kPi / 2;
      const double sx = 0.45 * P, sy = 0.6 * P;
      const int r = static_cast<int>(std::ceil(2.0 * sy));
      it = kernels.emplace(std::make_pair(ai, pi), ridge::gabor_kernel(normal, 1.0 / P, sx, sy, 2 * r + 1)).first;
    }
    return it->second;
  };

  Image field(w, h);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : field.data()) v = nd(rng);
  Image next(w, h);
  // The last pass skips the clipping so the output keeps a band-limited,
  // near-sinusoidal ridge profile.
  for (int it = 0; it <= p.iterations; ++it) {
    double ss = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const ridge::GaborKernel& k = kernel_for(theta(x, y), period(x, y));
        const int r = k.radius();
        double acc = 0.0;
        for (int v = -r; v <= r; ++v) {
          const int yy = std::clamp(y + v, 0, h - 1);
          const double* row = &field(0, yy);
          for (int uu = -r; uu <= r; ++uu) acc += k.re(uu, v) * row[std::clamp(x + uu, 0, w - 1)];
        }
        next(x, y) = acc;
        ss += acc * acc;
      }
    const double rms = std::sqrt(ss / static_cast<double>(next.size()));
    const bool last = it == p.iterations;
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double v = next.data()[i] / std::max(rms, 1e-12);
      field.data()[i] = last ? v / std::sqrt(2.0) : std::clamp(1.5 * v, -1.0, 1.0);
    }
  }

  Phantom out{Image(w, h, kFill), Mask(w, h, 0)};
  const double ex = w * 0.5, ey = h * 0.52, ax = w * 0.42, ay = h * 0.46;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double e = std::pow((x - ex) / ax, 2) + std::pow((y - ey) / ay, 2);
      if (p.finger_mask && e > 1.0) continue;
      out.mask(x, y) = 1;
      out.image(x, y) = std::clamp(std::round(128.0 + p.contrast * field(x, y) + p.noise * nd(rng)), 0.0, 255.0);
    }
  return out;
}

Phantom make_training_phantom(int size, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 1));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PhantomParams p;
  // Grow a larger print and crop, so crops see varied curvature and
  // sometimes a singular point.
  p.width = p.height = std::max(2 * size, 96);
  p.cores = u(rng) < 0.7 ? 1 : 2;
  p.finger_mask = false;
  p.period_min = 7.5 + 1.5 * u(rng);
  p.period_max = p.period_min + 1.0 + 2.0 * u(rng);
  const Phantom big = make_phantom(p, mix_seed(seed, 2));
  const int ox = static_cast<int>(u(rng) * (p.width - size));
  const int oy = static_cast<int>(u(rng) * (p.height - size));
  Phantom crop{Image(size, size), Mask(size, size, 1)};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) crop.image(x, y) = big.image(ox + x, oy + y);
  return crop;
}

DisplacementField random_tps_field(int w, int h, double magnitude, int grid, std::uint64_t seed) {
  if (w < 2 || h < 2) throw SynthError("field must be at least 2x2");
  if (magnitude < 0 || magnitude > kMaxMagnitude) throw SynthError("magnitude must be in [0, 30]");
  if (grid < 3) throw SynthError("control grid must be at least 3x3");
  DisplacementField out(w, h);
  if (magnitude == 0.0) return out;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, magnitude / 2.0);
  std::vector<tps::Point> src, dst;
  for (int j = 0; j < grid; ++j)
    for (int i = 0; i < grid; ++i) {
      const tps::Point p{i * (w - 1.0) / (grid - 1), j * (h - 1.0) / (grid - 1)};
      const double ox = std::clamp(nd(rng), -magnitude, magnitude);
      const double oy = std::clamp(nd(rng), -magnitude, magnitude);
      src.push_back(p);
      dst.push_back({p.x + ox, p.y + oy});
    }
  const tps::TpsModel m = tps::tps_fit(src, dst);
  DisplacementField raw(w, h);
  double mx = 0.0, my = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const tps::Point q = m({static_cast<double>(x), static_cast<double>(y)});
      raw.dx(x, y) = q.x - x;
      raw.dy(x, y) = q.y - y;
      mx += raw.dx(x, y);
      my += raw.dy(x, y);
    }
  mx /= w * h;
  my /= w * h;
  // Shrink the part beyond the mean shift until the area change stays within
  // bounds; unconstrained draws fold or squeeze ridges below what a pixel grid holds.
  double k = 1.0;
  for (int tries = 0; tries < 60; ++tries) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        out.dx(x, y) = std::clamp(mx + k * (raw.dx(x, y) - mx), -magnitude, magnitude);
        out.dy(x, y) = std::clamp(my + k * (raw.dy(x, y) - my), -magnitude, magnitude);
      }
    const auto [jmin, jmax] = jacobian_range(out);
    if (jmin >= kMinJacobian && jmax <= kMaxJacobian) break;
    k *= 0.9;
  }
  return out;
}

std::pair<double, double> jacobian_range(const DisplacementField& d) {
  const int w = d.width(), h = d.height();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int xa = std::max(x - 1, 0), xb = std::min(x + 1, w - 1);
      const int ya = std::max(y - 1, 0), yb = std::min(y + 1, h - 1);
      const double ux = (d.dx(xb, y) - d.dx(xa, y)) / (xb - xa), uy = (d.dx(x, yb) - d.dx(x, ya)) / (yb - ya);
      const double vx = (d.dy(xb, y) - d.dy(xa, y)) / (xb - xa), vy = (d.dy(x, yb) - d.dy(x, ya)) / (yb - ya);
      const double j = (1.0 + ux) * (1.0 + vy) - uy * vx;
      lo = std::min(lo, j);
      hi = std::max(hi, j);
    }
  return {lo, hi};
}

TrainSample synthesize_pair(const Image& I, const DisplacementField& D, const Mask& mask) {
  if (!I.same_shape(D.dx) || !I.same_shape(mask)) throw SynthError("synthesize_pair: size mismatch");
  for (std::size_t i = 0; i < D.dx.size(); ++i)
    if (std::fabs(D.dx.data()[i]) > kMaxMagnitude || std::fabs(D.dy.data()[i]) > kMaxMagnitude)
      throw SynthError("synthesize_pair: |D| exceeds 30 px");
  TrainSample s;
  s.I = I;
  s.mask = mask;
  ForwardWarp fw = warp_forward(I, D, kFill);
  s.Iprime = std::move(fw.image);
  s.F = D;
  s.F.scale = 1.0;
  Mask cov;
  s.Fprime = warp_forward(negate(D), D, &cov);
  s.mask_prime = mask_and(warp_forward(mask, D), cov);
  return s;
}

Augment parse_augment(const std::string& name) {
  if (name == "flip") return Augment::Flip;
  if (name == "rot90") return Augment::Rot90;
  if (name == "rot180") return Augment::Rot180;
  if (name == "rot270") return Augment::Rot270;
  if (name == "swap") return Augment::Swap;
  throw SynthError("unsupported augmentation: " + name);
}

std::string to_string(Augment a) {
  switch (a) {
    case Augment::Flip: return "flip";
    case Augment::Rot90: return "rot90";
    case Augment::Rot180: return "rot180";
    case Augment::Rot270: return "rot270";
    case Augment::Swap: return "swap";
  }
  return "?";
}

namespace {

template <typename T>
Grid<T> mirror(const Grid<T>& g) {
  Grid<T> out(g.width(), g.height());
  for (int y = 0; y < g.height(); ++y)
    for (int x = 0; x < g.width(); ++x) out(x, y) = g(g.width() - 1 - x, y);
  return out;
}

// Old pixel (x, y) moves to (H-1-y, x).
template <typename T>
Grid<T> rotate(const Grid<T>& g) {
  const int h = g.height();
  Grid<T> out(h, g.width());
  for (int y = 0; y < g.height(); ++y)
    for (int x = 0; x < g.width(); ++x) out(h - 1 - y, x) = g(x, y);
  return out;
}

DisplacementField mirror(const DisplacementField& f) {
  DisplacementField out;
  out.dx = mirror(f.dx);
  out.dy = mirror(f.dy);
  out.scale = f.scale;
  for (auto& v : out.dx.data()) v = -v;
  return out;
}

DisplacementField rotate(const DisplacementField& f) {
  DisplacementField out;
  out.dx = rotate(f.dy);
  out.dy = rotate(f.dx);
  out.scale = f.scale;
  for (auto& v : out.dx.data()) v = -v;
  return out;
}

TrainSample rot90(const TrainSample& s) {
  return {rotate(s.I), rotate(s.Iprime), rotate(s.F), rotate(s.Fprime), rotate(s.mask), rotate(s.mask_prime)};
}

}  // namespace

TrainSample augment(const TrainSample& s, Augment op) {
  switch (op) {
    case Augment::Flip:
      return {mirror(s.I), mirror(s.Iprime), mirror(s.F), mirror(s.Fprime), mirror(s.mask), mirror(s.mask_prime)};
    case Augment::Rot90: return rot90(s);
    case Augment::Rot180: return rot90(rot90(s));
    case Augment::Rot270: return rot90(rot90(rot90(s)));
    case Augment::Swap: return {s.Iprime, s.I, s.Fprime, s.F, s.mask_prime, s.mask};
  }
  throw SynthError("unsupported augmentation");
}

TrainSample random_augment(const TrainSample& s, std::uint64_t seed) {
  const std::uint64_t bits = mix_seed(seed, 0x617567);
  TrainSample out = s;
  if (bits & 1) out = augment(out, Augment::Flip);
  for (std::uint64_t r = (bits >> 1) & 3; r > 0; --r) out = augment(out, Augment::Rot90);
  if (bits & 8) out = augment(out, Augment::Swap);
  return out;
}

Mask consistency_region(const TrainSample& s, int margin) {
  const int w = s.I.width(), h = s.I.height();
  Mask out(w, h, 0);
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      if (!s.mask(x, y)) continue;
      const double tx = x + s.F.dx(x, y), ty = y + s.F.dy(x, y);
      if (tx < 0 || ty < 0 || tx > w - 1 || ty > h - 1) continue;
      const int x0 = static_cast<int>(std::floor(tx)), y0 = static_cast<int>(std::floor(ty));
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      if (s.mask_prime(x0, y0) && s.mask_prime(x1, y0) && s.mask_prime(x0, y1) && s.mask_prime(x1, y1))
        out(x, y) = 1;
    }
  return out;
}

double consistency_error(const TrainSample& s, int margin) {
  const Mask region = consistency_region(s, margin);
  const Image back = warp_backward(s.Iprime, s.F, kFill);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (!region.data()[i]) continue;
    sum += std::fabs(back.data()[i] - s.I.data()[i]);
    ++n;
  }
  if (n == 0) throw SynthError("consistency_error: empty region");
  return sum / static_cast<double>(n);
}

TrainSample generate_sample(int size, double magnitude, int grid, std::uint64_t seed) {
  const Phantom base = make_training_phantom(size, mix_seed(seed, 10));
  const DisplacementField d = random_tps_field(size, size, magnitude, grid, mix_seed(seed, 11));
  return synthesize_pair(base.image, d, base.mask);
}

// ---- dataset I/O ----------------------------------------------------------------------------

void write_sample(const std::string& dir, const TrainSample& s) {
  fs::create_directories(dir);
  io::write_pgm(dir + "/I.pgm", s.I);
  io::write_pgm(dir + "/Iprime.pgm", s.Iprime);
  io::write_field(dir + "/F.dfld", s.F);
  io::write_field(dir + "/Fprime.dfld", s.Fprime);
  io::write_mask_pgm(dir + "/mask.pgm", s.mask);
  io::write_mask_pgm(dir + "/maskprime.pgm", s.mask_prime);
}

TrainSample read_sample(const std::string& dir) {
  TrainSample s;
  s.I = io::read_pgm(dir + "/I.pgm");
  s.Iprime = io::read_pgm(dir + "/Iprime.pgm");
  s.F = io::read_field(dir + "/F.dfld");
  s.Fprime = io::read_field(dir + "/Fprime.dfld");
  s.mask = io::read_mask_pgm(dir + "/mask.pgm");
  s.mask_prime = fs::exists(dir + "/maskprime.pgm") ? io::read_mask_pgm(dir + "/maskprime.pgm")
                                                    : Mask(s.I.width(), s.I.height(), 1);
  return s;
}

namespace {

std::string sample_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", i);
  return buf;
}

}  // namespace

nlohmann::json write_dataset(const std::string& root, const DatasetSpec& spec) {
  if (spec.count < 1) throw SynthError("dataset count must be >= 1");
  fs::create_directories(root);
  nlohmann::json manifest = {{"size", spec.size},
                             {"magnitude", spec.magnitude},
                             {"grid", spec.grid},
                             {"seed", spec.seed},
                             {"samples", nlohmann::json::array()}};
  for (int i = 0; i < spec.count; ++i) {
    const std::uint64_t s = mix_seed(spec.seed, 1000 + static_cast<std::uint64_t>(i));
    const TrainSample sample = generate_sample(spec.size, spec.magnitude, spec.grid, s);
    const std::string id = sample_id(i);
    write_sample(root + "/" + id, sample);
    manifest["samples"].push_back({{"id", id}, {"seed", s}});
  }
  std::ofstream os(root + "/manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw SynthError("cannot write manifest in " + root);
  return manifest;
}

nlohmann::json read_manifest(const std::string& root) {
  std::ifstream is(root + "/manifest.json");
  if (!is) throw SynthError("missing manifest.json in " + root);
  try {
    nlohmann::json j;
    is >> j;
    if (!j.contains("samples") || !j["samples"].is_array()) throw SynthError("manifest lacks a samples array");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw SynthError(std::string("bad manifest: ") + e.what());
  }
}

std::vector<TrainSample> read_dataset(const std::string& root) {
  const auto manifest = read_manifest(root);
  std::vector<TrainSample> out;
  for (const auto& e : manifest["samples"]) out.push_back(read_sample(root + "/" + e.at("id").get<std::string>()));
  return out;
}

}  // namespace pdr::synth
