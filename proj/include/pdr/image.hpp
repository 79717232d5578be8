#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pdr {

/// Row-major 2-D raster, origin top-left.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T value = T{})
      : width_(width), height_(height), data_(checked_size(width, height), value) {}

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  const T& operator()(int x, int y) const {
    return data_[static_cast<std::size_t>(y) * width_ + x];
  }

  /// Border-replicating read.
  const T& clamped(int x, int y) const {
    x = x < 0 ? 0 : (x >= width_ ? width_ - 1 : x);
    y = y < 0 ? 0 : (y >= height_ ? height_ - 1 : y);
    return (*this)(x, y);
  }

  bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  template <typename U>
  bool same_shape(const Grid<U>& other) const {
    return width_ == other.width() && height_ == other.height();
  }

  bool operator==(const Grid&) const = default;

 private:
  static std::size_t checked_size(int w, int h) {
    if (w < 0 || h < 0) throw std::invalid_argument("negative grid dimensions");
    return static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

/// Grayscale intensities, double precision in memory (0..255 scale for raw images).
using Image = Grid<double>;

/// Foreground flags; nonzero = foreground.
using Mask = Grid<std::uint8_t>;

/// Per-cell displacement (dx, dy) in full-resolution pixel units.
/// `scale` is the ratio of this grid to full image resolution (1 or 1/8).
struct DisplacementField {
  Grid<double> dx;
  Grid<double> dy;
  double scale = 1.0;

  DisplacementField() = default;
  DisplacementField(int width, int height, double scale_ = 1.0)
      : dx(width, height), dy(width, height), scale(scale_) {}

  int width() const { return dx.width(); }
  int height() const { return dx.height(); }
  bool operator==(const DisplacementField&) const = default;
};

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sampling and warping. Border policy: sampling clamps, filters replicate,
// warps write an explicit fill value.

double bilinear_sample(const Grid<double>& img, double x, double y);

/// Gather: out(x, y) = img(x + dx(x, y), y + dy(x, y)); reads outside the raster
/// produce `fill`. A field F from A to B (A(p) lands on B(p + F(p))) therefore
/// pulls B back onto A's grid: warp_backward(B, F) ~ A.
Image warp_backward(const Image& img, const DisplacementField& field, double fill);
Mask warp_backward(const Mask& mask, const DisplacementField& field);

struct ForwardWarp {
  Image image;
  Mask coverage;
};

/// Forward mapping out(x + dx, y + dy) = img(x, y): the pixel mesh is moved
/// by the field and rasterized, one nearest-valid-neighbour pass over holes,
/// `fill` elsewhere.
ForwardWarp warp_forward(const Image& img, const DisplacementField& field, double fill);

/// Same scatter applied to an arbitrary per-pixel payload (e.g. another field).
DisplacementField warp_forward(const DisplacementField& payload, const DisplacementField& field,
                               Mask* coverage = nullptr);

Mask warp_forward(const Mask& mask, const DisplacementField& field);

/// Pixel-centre aligned bilinear resampling.
Image resize_bilinear(const Image& img, int target_w, int target_h);
/// Values are kept in full-resolution pixel units; only `scale` changes.
DisplacementField resize_bilinear(const DisplacementField& field, int target_w, int target_h);

/// 5-point Laplacian with replicate padding.
Grid<double> laplacian(const Grid<double>& g);

DisplacementField negate(const DisplacementField& f);

/// Block-average a full-resolution field onto `factor`×`factor` cells.
DisplacementField downsample_mean(const DisplacementField& field, int factor);

Mask mask_and(const Mask& a, const Mask& b);
std::size_t count(const Mask& m);

}  // namespace pdr
