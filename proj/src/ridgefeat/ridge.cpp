#include "pdr/ridge.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <unordered_map>

namespace pdr::ridge {

namespace {

constexpr double kPi = std::numbers::pi;

int block_count(int pixels, int block) { return (pixels + block - 1) / block; }

// Sums of squared-gradient products over a 2-block window around each block.
struct StructureTensor {
  double gxx = 0.0;
  double gyy = 0.0;
  double gxy = 0.0;
  std::size_t n = 0;

  double energy() const { return gxx + gyy; }
  // Doubled-angle vector of the gradient direction.
  double vx() const { return gxx - gyy; }
  double vy() const { return 2.0 * gxy; }
};

BlockMap<StructureTensor> block_tensors(const Image& img, int block) {
  const int w = img.width();
  const int h = img.height();
  Grid<double> gx(w, h), gy(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      gx(x, y) = (img.clamped(x + 1, y - 1) + 2 * img.clamped(x + 1, y) + img.clamped(x + 1, y + 1) -
                  img.clamped(x - 1, y - 1) - 2 * img.clamped(x - 1, y) - img.clamped(x - 1, y + 1)) /
                 8.0;
      gy(x, y) = (img.clamped(x - 1, y + 1) + 2 * img.clamped(x, y + 1) + img.clamped(x + 1, y + 1) -
                  img.clamped(x - 1, y - 1) - 2 * img.clamped(x, y - 1) - img.clamped(x + 1, y - 1)) /
                 8.0;
    }
  }
  const int cols = block_count(w, block);
  const int rows = block_count(h, block);
  BlockMap<StructureTensor> out(cols, rows, block);
  const int half = block / 2;
  for (int by = 0; by < rows; ++by) {
    for (int bx = 0; bx < cols; ++bx) {
      StructureTensor t;
      for (int y = std::max(0, by * block - half); y < std::min(h, (by + 1) * block + half); ++y) {
        for (int x = std::max(0, bx * block - half); x < std::min(w, (bx + 1) * block + half); ++x) {
          t.gxx += gx(x, y) * gx(x, y);
          t.gyy += gy(x, y) * gy(x, y);
          t.gxy += gx(x, y) * gy(x, y);
          ++t.n;
        }
      }
      out.at(bx, by) = t;
    }
  }
  return out;
}

bool tensor_defined(const StructureTensor& t) {
  // Mean squared gradient below this is treated as a flat block.
  constexpr double kMinEnergy = 1e-6;
  return t.n > 0 && t.energy() / static_cast<double>(t.n) > kMinEnergy;
}

double ridge_angle_from_doubled(double vx, double vy) {
  // Gradient direction is half the doubled angle; ridges run perpendicular.
  double theta = 0.5 * std::atan2(vy, vx) + kPi / 2.0;
  theta = std::fmod(theta, kPi);
  if (theta < 0) theta += kPi;
  if (theta >= kPi) theta -= kPi;
  return theta;
}

OrientationField orientation_from_tensors(const BlockMap<StructureTensor>& tensors) {
  OrientationField f(tensors.cols, tensors.rows, tensors.block);
  f.coherence.assign(f.value.size(), 0.0);
  for (int by = 0; by < f.rows; ++by) {
    for (int bx = 0; bx < f.cols; ++bx) {
      if (!tensor_defined(tensors.at(bx, by))) continue;
      // 3x3 block smoothing of the doubled-angle vectors.
      double vx = 0.0, vy = 0.0, e = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = bx + dx, ny = by + dy;
          if (!tensors.in_grid(nx, ny)) continue;
          const auto& t = tensors.at(nx, ny);
          if (!tensor_defined(t)) continue;
          const double wgt = (dx == 0 && dy == 0) ? 2.0 : 1.0;
          vx += wgt * t.vx();
          vy += wgt * t.vy();
          e += wgt * t.energy();
        }
      }
      f.at(bx, by) = ridge_angle_from_doubled(vx, vy);
      f.coherence[f.index(bx, by)] = e > 0 ? std::hypot(vx, vy) / e : 0.0;
      f.valid[f.index(bx, by)] = 1;
    }
  }
  return f;
}

// Local mean over a (2r+1)^2 box restricted to the raster.
Image box_mean(const Image& img, int r) {
  const int w = img.width(), h = img.height();
  std::vector<double> integral(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
  auto I = [&](int x, int y) -> double& { return integral[static_cast<std::size_t>(y) * (w + 1) + x]; };
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += img(x, y);
      I(x + 1, y + 1) = I(x + 1, y) + row;
    }
  }
  Image out(w, h);
  for (int y = 0; y < h; ++y) {
    const int y0 = std::max(0, y - r), y1 = std::min(h, y + r + 1);
    for (int x = 0; x < w; ++x) {
      const int x0 = std::max(0, x - r), x1 = std::min(w, x + r + 1);
      const double s = I(x1, y1) - I(x0, y1) - I(x1, y0) + I(x0, y0);
      out(x, y) = s / ((x1 - x0) * (y1 - y0));
    }
  }
  return out;
}

template <typename Combine>
void fill_blocks(BlockMap<double>& f, const Grid<std::uint8_t>& target, Combine combine) {
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<std::pair<std::size_t, double>> updates;
    for (int by = 0; by < f.rows; ++by) {
      for (int bx = 0; bx < f.cols; ++bx) {
        if (f.defined(bx, by) || !target(bx, by)) continue;
        std::vector<double> neighbours;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if ((dx || dy) && f.in_grid(bx + dx, by + dy) && f.defined(bx + dx, by + dy)) {
              neighbours.push_back(f.at(bx + dx, by + dy));
            }
          }
        }
        if (!neighbours.empty()) updates.emplace_back(f.index(bx, by), combine(neighbours));
      }
    }
    for (const auto& [i, v] : updates) {
      f.value[i] = v;
      f.valid[i] = 1;
      changed = true;
    }
  }
}

}  // namespace

std::complex<double> gabor_value(double theta, double f0, double sigma_x, double sigma_y, double x,
                                 double y) {
  const double xr = x * std::cos(theta) + y * std::sin(theta);
  const double yr = -x * std::sin(theta) + y * std::cos(theta);
  const double env = std::exp(-(xr * xr / (2 * sigma_x * sigma_x) + yr * yr / (2 * sigma_y * sigma_y)));
  const double arg = 2.0 * kPi * f0 * xr;
  return {env * std::cos(arg), env * std::sin(arg)};
}

GaborKernel gabor_kernel(double theta, double f0, double sigma_x, double sigma_y, int size) {
  if (size < 1 || size % 2 == 0) throw std::invalid_argument("gabor_kernel: size must be odd");
  if (!(f0 > 0.0)) throw std::invalid_argument("gabor_kernel: f0 must be positive");
  GaborKernel k;
  k.size = size;
  k.theta = theta;
  k.f0 = f0;
  k.sigma_x = sigma_x;
  k.sigma_y = sigma_y;
  k.real.resize(static_cast<std::size_t>(size) * size);
  k.imag.resize(k.real.size());
  const int r = size / 2;
  for (int v = -r; v <= r; ++v) {
    for (int u = -r; u <= r; ++u) {
      const auto g = gabor_value(theta, f0, sigma_x, sigma_y, u, v);
      const std::size_t i = static_cast<std::size_t>(v + r) * size + (u + r);
      k.real[i] = g.real();
      k.imag[i] = g.imag();
    }
  }
  return k;
}

double wrap_phase(double a) {
  double w = std::remainder(a, 2.0 * kPi);
  if (w <= -kPi) w += 2.0 * kPi;
  return w;
}

double orientation_difference(double a, double b) {
  double d = std::fmod(std::fabs(a - b), kPi);
  return d > kPi / 2 ? kPi - d : d;
}

OrientationField estimate_orientation(const Image& img, int block) {
  if (img.width() < 32 || img.height() < 32) {
    throw ImageError("estimate_orientation: image must be at least 32x32");
  }
  return orientation_from_tensors(block_tensors(img, block));
}

PeriodMap estimate_period(const Image& img, const OrientationField& orient, int block) {
  constexpr int kLength = 64;  // samples along the ridge normal
  constexpr int kWidth = 9;    // samples averaged along the ridge
  constexpr double kMinConcentration = 0.25;

  PeriodMap out(orient.cols, orient.rows, block);
  std::vector<double> window(kLength);
  double wsq = 0.0;
  for (int k = 0; k < kLength; ++k) {
    window[k] = 0.5 - 0.5 * std::cos(2.0 * kPi * (k + 0.5) / kLength);
    wsq += window[k] * window[k];
  }
  std::vector<double> sig(kLength);

  const double f_lo = 1.0 / kMaxPeriod;
  const double f_hi = 1.0 / kMinPeriod;
  const double df = 1.0 / (8.0 * kLength);

  for (int by = 0; by < orient.rows; ++by) {
    for (int bx = 0; bx < orient.cols; ++bx) {
      if (!orient.defined(bx, by)) continue;
      const double theta = orient.at(bx, by);
      const double nx = std::sin(theta), ny = -std::cos(theta);
      const double tx = std::cos(theta), ty = std::sin(theta);
      const double cx = orient.center_x(bx), cy = orient.center_y(by);

      double mean = 0.0;
      for (int k = 0; k < kLength; ++k) {
        const double s = k - (kLength - 1) / 2.0;
        double acc = 0.0;
        for (int j = -(kWidth / 2); j <= kWidth / 2; ++j) {
          acc += bilinear_sample(img, cx + s * nx + j * tx, cy + s * ny + j * ty);
        }
        sig[k] = acc / kWidth;
        mean += sig[k];
      }
      mean /= kLength;
      double energy = 0.0;
      for (int k = 0; k < kLength; ++k) {
        sig[k] = (sig[k] - mean) * window[k];
        energy += sig[k] * sig[k];
      }
      if (energy <= 1e-12) continue;

      auto power = [&](double f) {
        double re = 0.0, im = 0.0;
        for (int k = 0; k < kLength; ++k) {
          re += sig[k] * std::cos(2.0 * kPi * f * k);
          im -= sig[k] * std::sin(2.0 * kPi * f * k);
        }
        return re * re + im * im;
      };
      double best_f = f_lo, best_p = -1.0;
      for (double f = f_lo; f <= f_hi + 1e-12; f += df) {
        const double p = power(f);
        if (p > best_p) {
          best_p = p;
          best_f = f;
        }
      }
      // Parabolic refinement around the discrete maximum.
      const double pl = power(best_f - df), pr = power(best_f + df);
      const double denom = pl - 2.0 * best_p + pr;
      if (denom < 0.0) best_f += 0.5 * df * (pl - pr) / denom;
      best_p = std::max(best_p, power(best_f));

      if (best_p / (wsq * energy) < kMinConcentration) continue;
      out.at(bx, by) = std::clamp(1.0 / best_f, kMinPeriod, kMaxPeriod);
      out.valid[out.index(bx, by)] = 1;
    }
  }
  return out;
}

Mask segment_mask(const Image& img, int block, const SegmentParams& p) {
  const int w = img.width(), h = img.height();
  const int cols = block_count(w, block), rows = block_count(h, block);
  const auto tensors = block_tensors(img, block);
  Grid<std::uint8_t> fg(cols, rows, 0);
  const int half = block / 2;
  for (int by = 0; by < rows; ++by) {
    for (int bx = 0; bx < cols; ++bx) {
      double s = 0.0, s2 = 0.0;
      int n = 0;
      for (int y = std::max(0, by * block - half); y < std::min(h, (by + 1) * block + half); ++y) {
        for (int x = std::max(0, bx * block - half); x < std::min(w, (bx + 1) * block + half); ++x) {
          s += img(x, y);
          s2 += img(x, y) * img(x, y);
          ++n;
        }
      }
      const double mean = s / n;
      const double sd = std::sqrt(std::max(0.0, s2 / n - mean * mean));
      const auto& t = tensors.at(bx, by);
      const double coh = t.energy() > 0 ? std::hypot(t.vx(), t.vy()) / t.energy() : 0.0;
      fg(bx, by) = (sd > p.min_std && coh > p.min_coherence) ? 1 : 0;
    }
  }

  // Morphological closing (3x3) on the block grid; the grid border replicates.
  auto morph = [&](const Grid<std::uint8_t>& in, bool dilate) {
    Grid<std::uint8_t> out(cols, rows, 0);
    for (int by = 0; by < rows; ++by) {
      for (int bx = 0; bx < cols; ++bx) {
        bool hit = !dilate;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const bool v = in.clamped(bx + dx, by + dy) != 0;
            if (dilate && v) hit = true;
            if (!dilate && !v) hit = false;
          }
        }
        out(bx, by) = hit ? 1 : 0;
      }
    }
    return out;
  };
  fg = morph(morph(fg, true), false);

  Mask mask(w, h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) mask(x, y) = fg(x / block, y / block);
  }
  return mask;
}

Grid<std::uint8_t> block_mask(const Mask& mask, int block, int cols, int rows) {
  Grid<std::uint8_t> out(cols, rows, 0);
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      const int bx = x / block, by = y / block;
      if (mask(x, y) && bx < cols && by < rows) out(bx, by) = 1;
    }
  }
  return out;
}

void fill_undefined(OrientationField& field, const Grid<std::uint8_t>& target) {
  fill_blocks(field, target, [](const std::vector<double>& thetas) {
    double vx = 0.0, vy = 0.0;
    for (double t : thetas) {
      vx += std::cos(2.0 * t);
      vy += std::sin(2.0 * t);
    }
    double theta = 0.5 * std::atan2(vy, vx);
    if (theta < 0) theta += kPi;
    return theta >= kPi ? theta - kPi : theta;
  });
  field.coherence.resize(field.value.size(), 0.0);
}

void fill_undefined(PeriodMap& field, const Grid<std::uint8_t>& target) {
  fill_blocks(field, target, [](const std::vector<double>& periods) {
    double s = 0.0;
    for (double p : periods) s += p;
    return s / static_cast<double>(periods.size());
  });
}

EnhanceResult enhance_and_phase(const Image& img, const OrientationField& orient,
                                const PeriodMap& period, const Mask& mask) {
  if (!img.same_shape(mask)) throw ImageError("enhance_and_phase: mask size mismatch");
  const int w = img.width(), h = img.height();
  const int block = orient.block;
  if (orient.cols != period.cols || orient.rows != period.rows ||
      orient.cols != block_count(w, block) || orient.rows != block_count(h, block)) {
    throw ImageError("enhance_and_phase: block maps do not match the image");
  }

  const Image local_mean = box_mean(img, block);
  Image centred(w, h);
  for (std::size_t i = 0; i < centred.size(); ++i) {
    centred.data()[i] = img.data()[i] - local_mean.data()[i];
  }

  std::unordered_map<std::size_t, GaborKernel> kernels;
  Grid<double> re(w, h, 0.0);
  Grid<double> phase(w, h, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask(x, y)) continue;
      const int bx = x / block, by = y / block;
      if (!orient.defined(bx, by) || !period.defined(bx, by)) {
        throw ImageError("enhance_and_phase: undefined orientation/period under the mask at block (" +
                         std::to_string(bx) + "," + std::to_string(by) + ")");
      }
      const std::size_t bi = orient.index(bx, by);
      auto it = kernels.find(bi);
      if (it == kernels.end()) {
        const double p = period.at(bx, by);
        const double sigma = 0.5 * p;
        int size = static_cast<int>(std::lround(4.0 * sigma));
        if (size % 2 == 0) ++size;
        // Oscillate along the ridge normal.
        const double normal = orient.at(bx, by) - kPi / 2.0;
        it = kernels.emplace(bi, gabor_kernel(normal, 1.0 / p, sigma, sigma, size)).first;
      }
      const GaborKernel& k = it->second;
      const int r = k.radius();
      double zr = 0.0, zi = 0.0;
      for (int v = -r; v <= r; ++v) {
        for (int u = -r; u <= r; ++u) {
          const double px = centred.clamped(x + u, y + v);
          zr += k.re(u, v) * px;
          zi += k.im(u, v) * px;
        }
      }
      re(x, y) = zr;
      double phi = std::atan2(zr, zi);
      if (phi <= -kPi) phi = kPi;
      phase(x, y) = phi;
    }
  }

  double s = 0.0, s2 = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < re.size(); ++i) {
    if (!mask.data()[i]) continue;
    s += re.data()[i];
    s2 += re.data()[i] * re.data()[i];
    ++n;
  }
  Image enhanced(w, h, 0.0);
  if (n > 0) {
    const double mean = s / n;
    const double sd = std::sqrt(std::max(0.0, s2 / n - mean * mean));
    if (sd > 0.0) {
      for (std::size_t i = 0; i < re.size(); ++i) {
        if (mask.data()[i]) enhanced.data()[i] = std::clamp((re.data()[i] - mean) / sd, -3.0, 3.0);
      }
    }
  }
  return {std::move(enhanced), std::move(phase)};
}

RidgeFeatures analyze(const Image& img, int block) {
  RidgeFeatures f;
  f.mask = segment_mask(img, block);
  f.orientation = estimate_orientation(img, block);
  f.period = estimate_period(img, f.orientation, block);
  const auto fg = block_mask(f.mask, block, f.orientation.cols, f.orientation.rows);
  fill_undefined(f.orientation, fg);
  fill_undefined(f.period, fg);
  return f;
}

PreprocessedPair preprocess_pair(const Image& input, const Image& ref) {
  return preprocess_pair(input, ref, segment_mask(input), segment_mask(ref));
}

PreprocessedPair preprocess_pair(const Image& input, const Image& ref, const Mask& mask_input,
                                 const Mask& mask_ref) {
  if (!input.same_shape(ref) || !input.same_shape(mask_input) || !input.same_shape(mask_ref)) {
    throw ImageError("preprocess_pair: images and masks must share one grid");
  }
  const int block = kBlockSize;
  auto ti = block_tensors(input, block);
  const auto tr = block_tensors(ref, block);
  for (std::size_t i = 0; i < ti.value.size(); ++i) {
    ti.value[i].gxx += tr.value[i].gxx;
    ti.value[i].gyy += tr.value[i].gyy;
    ti.value[i].gxy += tr.value[i].gxy;
    ti.value[i].n += tr.value[i].n;
  }
  PreprocessedPair out;
  out.orientation = orientation_from_tensors(ti);

  const PeriodMap pi = estimate_period(input, out.orientation, block);
  const PeriodMap pr = estimate_period(ref, out.orientation, block);
  out.period = PeriodMap(pi.cols, pi.rows, block);
  for (std::size_t i = 0; i < pi.value.size(); ++i) {
    const bool a = pi.valid[i], b = pr.valid[i];
    if (a || b) {
      out.period.value[i] = (a && b) ? 0.5 * (pi.value[i] + pr.value[i]) : (a ? pi.value[i] : pr.value[i]);
      out.period.valid[i] = 1;
    }
  }

  Mask either(input.width(), input.height());
  for (std::size_t i = 0; i < either.size(); ++i) {
    either.data()[i] = (mask_input.data()[i] || mask_ref.data()[i]) ? 1 : 0;
  }
  const auto fg = block_mask(either, block, out.orientation.cols, out.orientation.rows);
  fill_undefined(out.orientation, fg);
  fill_undefined(out.period, fg);

  // Foreground blocks that remain undefined (no defined neighbour at all) are dropped.
  Mask mi = mask_input, mr = mask_ref;
  for (int y = 0; y < input.height(); ++y) {
    for (int x = 0; x < input.width(); ++x) {
      const int bx = x / block, by = y / block;
      if (!out.orientation.defined(bx, by) || !out.period.defined(bx, by)) {
        mi(x, y) = 0;
        mr(x, y) = 0;
      }
    }
  }

  const EnhanceResult ei = enhance_and_phase(input, out.orientation, out.period, mi);
  const EnhanceResult er = enhance_and_phase(ref, out.orientation, out.period, mr);
  out.enh_input = ei.enhanced;
  out.enh_ref = er.enhanced;
  out.psi = Grid<double>(input.width(), input.height(), 0.0);
  std::size_t common = 0;
  for (std::size_t i = 0; i < out.psi.size(); ++i) {
    if (mi.data()[i] && mr.data()[i]) {
      out.psi.data()[i] = wrap_phase(ei.phase.data()[i] - er.phase.data()[i]);
      ++common;
    }
  }
  out.empty_overlap = common == 0;
  out.mask_input = std::move(mi);
  out.mask_ref = std::move(mr);
  return out;
}

namespace {

template <typename Fn>
void write_grid(std::ostream& out, const BlockMap<double>& f, Fn fmt) {
  for (int by = 0; by < f.rows; ++by) {
    for (int bx = 0; bx < f.cols; ++bx) {
      if (bx) out << ' ';
      if (f.defined(bx, by)) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3f", fmt(f.at(bx, by)));
        out << buf;
      } else {
        out << '-';
      }
    }
    out << '\n';
  }
}

template <typename Fn>
void read_grid(std::istream& in, BlockMap<double>& f, int block, Fn parse) {
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> toks;
    for (std::string t; ls >> t;) toks.push_back(t);
    if (toks.empty()) continue;
    if (!rows.empty() && toks.size() != rows.front().size()) {
      throw ImageError("block grid: ragged rows");
    }
    rows.push_back(std::move(toks));
  }
  const int r = static_cast<int>(rows.size());
  const int c = r ? static_cast<int>(rows.front().size()) : 0;
  f = BlockMap<double>(c, r, block);
  for (int by = 0; by < r; ++by) {
    for (int bx = 0; bx < c; ++bx) {
      const std::string& t = rows[by][bx];
      if (t == "-") continue;
      f.at(bx, by) = parse(std::stod(t));
      f.valid[f.index(bx, by)] = 1;
    }
  }
}

}  // namespace

void write_orientation(std::ostream& out, const OrientationField& f) {
  write_grid(out, f, [](double t) { return t * 180.0 / kPi; });
}

void write_period(std::ostream& out, const PeriodMap& f) {
  write_grid(out, f, [](double p) { return p; });
}

OrientationField read_orientation(std::istream& in, int block) {
  BlockMap<double> g;
  read_grid(in, g, block, [](double deg) {
    double t = std::fmod(deg * kPi / 180.0, kPi);
    return t < 0 ? t + kPi : t;
  });
  OrientationField f;
  static_cast<BlockMap<double>&>(f) = std::move(g);
  f.coherence.assign(f.value.size(), 0.0);
  return f;
}

PeriodMap read_period(std::istream& in, int block) {
  PeriodMap f;
  read_grid(in, f, block, [](double p) { return p; });
  return f;
}

}  // namespace pdr::ridge
