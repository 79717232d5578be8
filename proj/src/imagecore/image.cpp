#include "pdr/image.hpp"

#include <algorithm>
#include <cmath>

namespace pdr {

namespace {

void require_same(int w1, int h1, int w2, int h2, const char* what) {
  if (w1 != w2 || h1 != h2) {
    throw ImageError(std::string(what) + ": dimension mismatch (" + std::to_string(w1) + "x" +
                     std::to_string(h1) + " vs " + std::to_string(w2) + "x" +
                     std::to_string(h2) + ")");
  }
}

// Bilinear read without clamping; caller guarantees 0 <= x <= w-1, 0 <= y <= h-1.
double interp(const Grid<double>& img, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const double top = fx == 0.0 ? img(x0, y0) : (1.0 - fx) * img(x0, y0) + fx * img(x1, y0);
  if (fy == 0.0) return top;
  const double bot = fx == 0.0 ? img(x0, y1) : (1.0 - fx) * img(x0, y1) + fx * img(x1, y1);
  return (1.0 - fy) * top + fy * bot;
}

// Catmull-Rom read, taps clamped at the border; same precondition as interp.
double interp_cubic(const Grid<double>& img, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  if (fx == 0.0 && fy == 0.0) return img(x0, y0);
  auto wts = [](double t, double (&k)[4]) {
    const double t2 = t * t, t3 = t2 * t;
    k[0] = 0.5 * (-t3 + 2 * t2 - t);
    k[1] = 0.5 * (3 * t3 - 5 * t2 + 2);
    k[2] = 0.5 * (-3 * t3 + 4 * t2 + t);
    k[3] = 0.5 * (t3 - t2);
  };
  double kx[4], ky[4];
  wts(fx, kx);
  wts(fy, ky);
  double sum = 0.0;
  for (int j = 0; j < 4; ++j) {
    const int yy = std::clamp(y0 - 1 + j, 0, img.height() - 1);
    double row = 0.0;
    for (int i = 0; i < 4; ++i) row += kx[i] * img(std::clamp(x0 - 1 + i, 0, img.width() - 1), yy);
    sum += ky[j] * row;
  }
  return sum;
}

bool in_range(const Grid<double>& img, double x, double y) {
  return x >= 0.0 && y >= 0.0 && x <= img.width() - 1 && y <= img.height() - 1;
}

// Forward warp by mesh rasterization: every source cell is split into two
// triangles, moved by the field, and each target pixel inside a moved triangle
// takes the payload at the barycentric source position (Catmull-Rom read, so
// ridges survive the later bilinear gather far better than with a splat).
// Where the mesh folds, the first triangle in raster order wins.
struct Scatter {
  std::vector<Grid<double>> values;
  Mask coverage;
};

Scatter scatter(const std::vector<const Grid<double>*>& payload, const DisplacementField& field) {
  const int w = field.width();
  const int h = field.height();
  const std::size_t nc = payload.size();
  std::vector<Grid<double>> acc(nc, Grid<double>(w, h, 0.0));
  Mask valid(w, h, 0);

  auto raster = [&](const double (&sx)[3], const double (&sy)[3]) {
    double tx[3], ty[3];
    for (int k = 0; k < 3; ++k) {
      const int ix = static_cast<int>(sx[k]), iy = static_cast<int>(sy[k]);
      tx[k] = sx[k] + field.dx(ix, iy);
      ty[k] = sy[k] + field.dy(ix, iy);
      if (!std::isfinite(tx[k]) || !std::isfinite(ty[k])) return;
    }
    const double det = (tx[1] - tx[0]) * (ty[2] - ty[0]) - (tx[2] - tx[0]) * (ty[1] - ty[0]);
    if (std::fabs(det) < 1e-12) return;
    const int x_lo = std::max(0, static_cast<int>(std::ceil(std::min({tx[0], tx[1], tx[2]}) - 1e-9)));
    const int x_hi = std::min(w - 1, static_cast<int>(std::floor(std::max({tx[0], tx[1], tx[2]}) + 1e-9)));
    const int y_lo = std::max(0, static_cast<int>(std::ceil(std::min({ty[0], ty[1], ty[2]}) - 1e-9)));
    const int y_hi = std::min(h - 1, static_cast<int>(std::floor(std::max({ty[0], ty[1], ty[2]}) + 1e-9)));
    constexpr double kEdge = -1e-9;
    for (int y = y_lo; y <= y_hi; ++y) {
      for (int x = x_lo; x <= x_hi; ++x) {
        if (valid(x, y)) continue;
        const double l1 = ((x - tx[0]) * (ty[2] - ty[0]) - (tx[2] - tx[0]) * (y - ty[0])) / det;
        const double l2 = ((tx[1] - tx[0]) * (y - ty[0]) - (x - tx[0]) * (ty[1] - ty[0])) / det;
        const double l0 = 1.0 - l1 - l2;
        if (l0 < kEdge || l1 < kEdge || l2 < kEdge) continue;
        const double px = std::clamp(l0 * sx[0] + l1 * sx[1] + l2 * sx[2], 0.0, w - 1.0);
        const double py = std::clamp(l0 * sy[0] + l1 * sy[1] + l2 * sy[2], 0.0, h - 1.0);
        for (std::size_t c = 0; c < nc; ++c) acc[c](x, y) = interp_cubic(*payload[c], px, py);
        valid(x, y) = 1;
      }
    }
  };

  for (int y = 0; y + 1 < h; ++y) {
    for (int x = 0; x + 1 < w; ++x) {
      const double x0 = x, x1 = x + 1, y0 = y, y1 = y + 1;
      raster({x0, x1, x1}, {y0, y0, y1});
      raster({x0, x1, x0}, {y0, y1, y1});
    }
  }

  // One pass of nearest-valid-neighbour hole filling: 4-neighbours first,
  // diagonals only if no 4-neighbour is valid.
  Mask filled = valid;
  static constexpr int kAxial[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  static constexpr int kDiag[4][2] = {{1, 1}, {-1, 1}, {1, -1}, {-1, -1}};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (valid(x, y)) continue;
      for (const auto* ring : {kAxial, kDiag}) {
        int n = 0;
        std::vector<double> sum(nc, 0.0);
        for (int k = 0; k < 4; ++k) {
          const int nx = x + ring[k][0];
          const int ny = y + ring[k][1];
          if (!valid.inside(nx, ny) || !valid(nx, ny)) continue;
          ++n;
          for (std::size_t c = 0; c < nc; ++c) sum[c] += acc[c](nx, ny);
        }
        if (n > 0) {
          for (std::size_t c = 0; c < nc; ++c) acc[c](x, y) = sum[c] / n;
          filled(x, y) = 1;
          break;
        }
      }
    }
  }
  return {std::move(acc), std::move(filled)};
}

}  // namespace

double bilinear_sample(const Grid<double>& img, double x, double y) {
  if (img.empty()) throw ImageError("bilinear_sample: empty image");
  x = std::clamp(x, 0.0, static_cast<double>(img.width() - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height() - 1));
  return interp(img, x, y);
}

Image warp_backward(const Image& img, const DisplacementField& field, double fill) {
  require_same(img.width(), img.height(), field.width(), field.height(), "warp_backward");
  Image out(img.width(), img.height(), fill);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const double sx = x + field.dx(x, y);
      const double sy = y + field.dy(x, y);
      if (in_range(img, sx, sy)) out(x, y) = interp(img, sx, sy);
    }
  }
  return out;
}

Mask warp_backward(const Mask& mask, const DisplacementField& field) {
  require_same(mask.width(), mask.height(), field.width(), field.height(), "warp_backward");
  Grid<double> m(mask.width(), mask.height());
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = mask.data()[i] ? 1.0 : 0.0;
  const Image warped = warp_backward(m, field, 0.0);
  Mask out(mask.width(), mask.height(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = warped.data()[i] >= 0.5 ? 1 : 0;
  return out;
}

ForwardWarp warp_forward(const Image& img, const DisplacementField& field, double fill) {
  require_same(img.width(), img.height(), field.width(), field.height(), "warp_forward");
  Scatter s = scatter({&img}, field);
  Image out = std::move(s.values[0]);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!s.coverage.data()[i]) out.data()[i] = fill;
  }
  return {std::move(out), std::move(s.coverage)};
}

DisplacementField warp_forward(const DisplacementField& payload, const DisplacementField& field,
                               Mask* coverage) {
  require_same(payload.width(), payload.height(), field.width(), field.height(), "warp_forward");
  Scatter s = scatter({&payload.dx, &payload.dy}, field);
  DisplacementField out(field.width(), field.height(), payload.scale);
  out.dx = std::move(s.values[0]);
  out.dy = std::move(s.values[1]);
  for (std::size_t i = 0; i < s.coverage.size(); ++i) {
    if (!s.coverage.data()[i]) {
      out.dx.data()[i] = 0.0;
      out.dy.data()[i] = 0.0;
    }
  }
  if (coverage) *coverage = std::move(s.coverage);
  return out;
}

Mask warp_forward(const Mask& mask, const DisplacementField& field) {
  require_same(mask.width(), mask.height(), field.width(), field.height(), "warp_forward");
  Grid<double> m(mask.width(), mask.height());
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = mask.data()[i] ? 1.0 : 0.0;
  Scatter s = scatter({&m}, field);
  Mask out(mask.width(), mask.height(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data()[i] = (s.coverage.data()[i] && s.values[0].data()[i] >= 0.5) ? 1 : 0;
  }
  return out;
}

Image resize_bilinear(const Image& img, int target_w, int target_h) {
  if (target_w < 1 || target_h < 1) throw ImageError("resize_bilinear: target must be >= 1");
  if (img.empty()) throw ImageError("resize_bilinear: empty input");
  if (target_w == img.width() && target_h == img.height()) return img;
  const double sx = static_cast<double>(img.width()) / target_w;
  const double sy = static_cast<double>(img.height()) / target_h;
  Image out(target_w, target_h);
  for (int y = 0; y < target_h; ++y) {
    const double src_y = (y + 0.5) * sy - 0.5;
    for (int x = 0; x < target_w; ++x) {
      out(x, y) = bilinear_sample(img, (x + 0.5) * sx - 0.5, src_y);
    }
  }
  return out;
}

DisplacementField resize_bilinear(const DisplacementField& field, int target_w, int target_h) {
  DisplacementField out;
  out.dx = resize_bilinear(field.dx, target_w, target_h);
  out.dy = resize_bilinear(field.dy, target_w, target_h);
  out.scale = field.scale * static_cast<double>(target_w) / field.width();
  return out;
}

Grid<double> laplacian(const Grid<double>& g) {
  if (g.width() < 3 || g.height() < 3) throw ImageError("laplacian: grid smaller than 3x3");
  Grid<double> out(g.width(), g.height());
  for (int y = 0; y < g.height(); ++y) {
    for (int x = 0; x < g.width(); ++x) {
      out(x, y) = g.clamped(x - 1, y) + g.clamped(x + 1, y) + g.clamped(x, y - 1) +
                  g.clamped(x, y + 1) - 4.0 * g(x, y);
    }
  }
  return out;
}

DisplacementField negate(const DisplacementField& f) {
  DisplacementField out = f;
  for (auto& v : out.dx.data()) v = -v;
  for (auto& v : out.dy.data()) v = -v;
  return out;
}

DisplacementField downsample_mean(const DisplacementField& field, int factor) {
  if (factor < 1) throw ImageError("downsample_mean: factor must be >= 1");
  const int cw = field.width() / factor;
  const int ch = field.height() / factor;
  DisplacementField out(cw, ch, field.scale / factor);
  const double inv = 1.0 / (factor * factor);
  for (int cy = 0; cy < ch; ++cy) {
    for (int cx = 0; cx < cw; ++cx) {
      double sx = 0.0, sy = 0.0;
      for (int y = cy * factor; y < (cy + 1) * factor; ++y) {
        for (int x = cx * factor; x < (cx + 1) * factor; ++x) {
          sx += field.dx(x, y);
          sy += field.dy(x, y);
        }
      }
      out.dx(cx, cy) = sx * inv;
      out.dy(cx, cy) = sy * inv;
    }
  }
  return out;
}

Mask mask_and(const Mask& a, const Mask& b) {
  require_same(a.width(), a.height(), b.width(), b.height(), "mask_and");
  Mask out(a.width(), a.height());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = (a.data()[i] && b.data()[i]) ? 1 : 0;
  return out;
}

std::size_t count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.data().begin(), m.data().end(),
                                                [](std::uint8_t v) { return v != 0; }));
}

}  // namespace pdr
