#pragma once

#include <complex>
#include <iosfwd>
#include <string>
#include <vector>

#include "pdr/image.hpp"

namespace pdr::ridge {

inline constexpr int kBlockSize = 8;
inline constexpr double kMinPeriod = 3.0;
inline constexpr double kMaxPeriod = 25.0;

/// Block-sampled map with a per-block defined flag.
template <typename T>
struct BlockMap {
  int cols = 0;
  int rows = 0;
  int block = kBlockSize;
  std::vector<T> value;
  std::vector<std::uint8_t> valid;

  BlockMap() = default;
  BlockMap(int c, int r, int b, T init = T{})
      : cols(c), rows(r), block(b), value(static_cast<std::size_t>(c) * r, init),
        valid(static_cast<std::size_t>(c) * r, 0) {}

  std::size_t index(int bx, int by) const { return static_cast<std::size_t>(by) * cols + bx; }
  T& at(int bx, int by) { return value[index(bx, by)]; }
  const T& at(int bx, int by) const { return value[index(bx, by)]; }
  bool defined(int bx, int by) const { return valid[index(bx, by)] != 0; }
  bool in_grid(int bx, int by) const { return bx >= 0 && by >= 0 && bx < cols && by < rows; }
  /// Pixel coordinate of the block centre.
  double center_x(int bx) const { return (bx + 0.5) * block - 0.5; }
  double center_y(int by) const { return (by + 0.5) * block - 0.5; }
};

/// Ridge direction in [0, pi), image axes (x right, y down).
struct OrientationField : BlockMap<double> {
  using BlockMap::BlockMap;
  std::vector<double> coherence;
};

/// Ridge period in pixels.
using PeriodMap = BlockMap<double>;

struct GaborKernel {
  int size = 0;
  double theta = 0.0;
  double f0 = 0.0;
  double sigma_x = 0.0;
  double sigma_y = 0.0;
  std::vector<double> real;
  std::vector<double> imag;

  int radius() const { return size / 2; }
  /// Tap at offset (u, v) from the centre, |u|, |v| <= radius().
  double re(int u, int v) const { return real[tap(u, v)]; }
  double im(int u, int v) const { return imag[tap(u, v)]; }

 private:
  std::size_t tap(int u, int v) const {
    return static_cast<std::size_t>(v + radius()) * size + (u + radius());
  }
};

/// exp(-(x'^2/2sx^2 + y'^2/2sy^2)) * exp(i 2 pi f0 x'), (x', y') rotated by theta.
std::complex<double> gabor_value(double theta, double f0, double sigma_x, double sigma_y, double x,
                                 double y);
GaborKernel gabor_kernel(double theta, double f0, double sigma_x, double sigma_y, int size);

/// Wrap into (-pi, pi].
double wrap_phase(double a);
/// Smallest difference of two undirected angles, in [0, pi/2].
double orientation_difference(double a, double b);

OrientationField estimate_orientation(const Image& img, int block = kBlockSize);
PeriodMap estimate_period(const Image& img, const OrientationField& orient,
                          int block = kBlockSize);

struct SegmentParams {
  double min_std = 8.0;         // gray levels over a 2-block window
  double min_coherence = 0.25;  // structure-tensor coherence
};
Mask segment_mask(const Image& img, int block = kBlockSize, const SegmentParams& p = {});

/// Block-level foreground: a block counts if any of its pixels is foreground.
Grid<std::uint8_t> block_mask(const Mask& mask, int block, int cols, int rows);

/// Fill undefined blocks inside `target` from defined 8-neighbours, repeating
/// until stable. Orientation uses doubled-angle averaging.
void fill_undefined(OrientationField& field, const Grid<std::uint8_t>& target);
void fill_undefined(PeriodMap& field, const Grid<std::uint8_t>& target);

struct EnhanceResult {
  Image enhanced;     // Norm(Re[Z]) on the mask, 0 elsewhere
  Grid<double> phase;  // atan2(Re[Z], Im[Z]) on the mask, 0 elsewhere
};

/// Gabor kernel selected by each pixel's block: oscillation along the ridge normal,
/// f0 = 1/period, sigma = period/2, size = round(4 sigma) forced odd.
EnhanceResult enhance_and_phase(const Image& img, const OrientationField& orient,
                                const PeriodMap& period, const Mask& mask);

/// Per-image analysis used by the pair pipeline and the CLI.
struct RidgeFeatures {
  OrientationField orientation;
  PeriodMap period;
  Mask mask;
};
RidgeFeatures analyze(const Image& img, int block = kBlockSize);

struct PreprocessedPair {
  Image enh_input;   // E'_I
  Image enh_ref;     // E'_R
  Grid<double> psi;  // wrap(phi_I - phi_R) on the common mask
  Mask mask_input;
  Mask mask_ref;
  OrientationField orientation;  // shared by both images
  PeriodMap period;
  bool empty_overlap = false;
};

/// Both images share one orientation/period estimate (structure tensors summed,
/// periods averaged) so their phases are measured along the same normal.
PreprocessedPair preprocess_pair(const Image& input, const Image& ref);
PreprocessedPair preprocess_pair(const Image& input, const Image& ref, const Mask& mask_input,
                                 const Mask& mask_ref);

// Text grids: one line per block row, degrees (orientation) or pixels (period), "-" undefined.
void write_orientation(std::ostream& out, const OrientationField& f);
void write_period(std::ostream& out, const PeriodMap& f);
OrientationField read_orientation(std::istream& in, int block = kBlockSize);
PeriodMap read_period(std::istream& in, int block = kBlockSize);

}  // namespace pdr::ridge
