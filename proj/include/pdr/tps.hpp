#pragma once

#include <array>
#include <iosfwd>
#include <stdexcept>
#include <vector>

#include "pdr/image.hpp"

namespace pdr::tps {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

class TpsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Radial basis U(r) = r^2 log r, U(0) = 0, evaluated from the squared distance.
double kernel_u(double r2);

/// f(p) = A [x y 1]^T + sum_i w_i U(|p - c_i|), independently per output axis.
struct TpsModel {
  std::vector<Point> control;
  std::vector<double> wx;
  std::vector<double> wy;
  std::array<std::array<double, 3>, 2> affine{{{1, 0, 0}, {0, 1, 0}}};

  Point operator()(Point p) const;
};

/// Solves [K + reg I, P; P^T, 0][w; a] = [dst; 0]. reg = 0 interpolates exactly.
/// Throws TpsError("insufficient control points") for < 3 or collinear sources.
TpsModel tps_fit(const std::vector<Point>& src, const std::vector<Point>& dst, double reg = 0.0);

std::vector<Point> tps_eval(const TpsModel& model, const std::vector<Point>& pts);

struct ExtrapolateOptions {
  int stride = 4;
  double reg = 1e-3;
  /// The stride grows until at most this many samples remain.
  std::size_t max_points = 400;
};

/// Values inside `overlap` are kept; the rest are replaced by a TPS fitted
/// to a stride subsample of the overlap values.
DisplacementField tps_extrapolate_field(const DisplacementField& field, const Mask& overlap,
                                        const ExtrapolateOptions& opt = {});

// "x1 y1 x2 y2" per line.
struct Correspondence {
  Point a;
  Point b;
};
std::vector<Correspondence> read_correspondences(std::istream& in);
void write_correspondences(std::ostream& out, const std::vector<Correspondence>& pairs);

void write_model(std::ostream& out, const TpsModel& m);
TpsModel read_model(std::istream& in);

}  // namespace pdr::tps
