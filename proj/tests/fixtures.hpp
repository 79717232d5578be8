#pragma once

// Synthetic rasters shared by the unit and acceptance suites.

#include <cmath>
#include <numbers>
#include <random>

#include "pdr/image.hpp"

namespace fixtures {

inline constexpr double kPi = std::numbers::pi;

/// 128 + amp * cos(2 pi (x cos a + y sin a - shift) / period): ridges run at a + pi/2.
inline pdr::Image sinusoid(int w, int h, double period, double normal_angle = 0.0,
                           double shift = 0.0, double amp = 100.0) {
  pdr::Image img(w, h);
  const double c = std::cos(normal_angle), s = std::sin(normal_angle);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      img(x, y) = 128.0 + amp * std::cos(2.0 * kPi * (x * c + y * s - shift) / period);
    }
  }
  return img;
}

/// Smooth, non-periodic test image (no ridge structure).
inline pdr::Image smooth_image(int w, int h) {
  pdr::Image img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      img(x, y) = 128.0 + 50.0 * std::sin(x / 7.0) * std::cos(y / 9.0) + 30.0 * std::sin((x + y) / 13.0);
    }
  }
  return img;
}

/// Sum of a few random low-frequency sinusoids scaled so max |component| = max_mag.
inline pdr::DisplacementField smooth_field(int w, int h, double max_mag, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  pdr::DisplacementField f(w, h);
  for (auto* g : {&f.dx, &f.dy}) {
    double fx[3], fy[3], ph[3];
    for (int k = 0; k < 3; ++k) {
      fx[k] = (u(rng) - 0.5) * 4.0 * kPi / w;
      fy[k] = (u(rng) - 0.5) * 4.0 * kPi / h;
      ph[k] = u(rng) * 2.0 * kPi;
    }
    double mx = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = 0.0;
        for (int k = 0; k < 3; ++k) v += std::sin(fx[k] * x + fy[k] * y + ph[k]);
        (*g)(x, y) = v;
        mx = std::max(mx, std::fabs(v));
      }
    }
    for (auto& v : g->data()) v *= max_mag / mx;
  }
  return f;
}

inline pdr::DisplacementField constant_field(int w, int h, double dx, double dy) {
  pdr::DisplacementField f(w, h);
  for (auto& v : f.dx.data()) v = dx;
  for (auto& v : f.dy.data()) v = dy;
  return f;
}

inline double mean_abs_diff(const pdr::Image& a, const pdr::Image& b, int margin) {
  double s = 0.0;
  int n = 0;
  for (int y = margin; y < a.height() - margin; ++y) {
    for (int x = margin; x < a.width() - margin; ++x) {
      s += std::fabs(a(x, y) - b(x, y));
      ++n;
    }
  }
  return s / n;
}

}  // namespace fixtures
