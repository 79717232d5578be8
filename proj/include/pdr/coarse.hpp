#pragma once

#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pdr/image.hpp"
#include "pdr/ridge.hpp"
#include "pdr/tps.hpp"

namespace pdr::coarse {

class CoarseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MinutiaKind { Ending, Bifurcation, Unknown };
std::string to_string(MinutiaKind k);
MinutiaKind parse_minutia_kind(const std::string& s);

struct Minutia {
  double x = 0.0;
  double y = 0.0;
  double direction = 0.0;  // radians, [0, 2pi)
  MinutiaKind kind = MinutiaKind::Unknown;
};

// "MNT <count> <width> <height>", then "x y direction_deg kind" per line.
struct MinutiaeFile {
  int width = 0;
  int height = 0;
  std::vector<Minutia> points;
};
MinutiaeFile read_minutiae(std::istream& in);
void write_minutiae(std::ostream& out, const MinutiaeFile& f);
MinutiaeFile read_minutiae_file(const std::string& path);
void write_minutiae_file(const std::string& path, const MinutiaeFile& f);

/// Ridges are E < 0 (dark ridges stay negative after enhancement). `period`
/// sets the spur length and the border margin.
std::vector<Minutia> extract_minutiae(const Image& enh, const Mask& mask, double period = 9.0);

/// Binary ridge map thinned to one pixel (Zhang-Suen). Exposed for tests.
Grid<std::uint8_t> thin(const Grid<std::uint8_t>& bin);

/// p_ref = R(theta) (p_in - c) + c + t, c = (cx, cy).
struct RigidTransform {
  double tx = 0.0;
  double ty = 0.0;
  double theta = 0.0;
  double cx = 0.0;
  double cy = 0.0;

  tps::Point operator()(tps::Point p) const;
  RigidTransform inverse() const;
};

struct MinutiaPair {
  std::size_t a = 0;
  std::size_t b = 0;
};

struct MatchOptions {
  int neighbours = 5;
  double max_distance = 12.0;            // consensus gate, px
  double max_angle = 15.0 * 3.14159265358979323846 / 180.0;
  double max_descriptor_cost = 1.5;      // greedy stage cutoff, mean per neighbour
};

struct MatchResult {
  std::vector<MinutiaPair> pairs;
  RigidTransform transform;  // a -> b, centre (0, 0)
};

MatchResult match_minutiae(const std::vector<Minutia>& a, const std::vector<Minutia>& b,
                           const MatchOptions& opt = {});

struct SearchOptions {
  double max_shift = 128.0;
  double shift_step = 8.0;
  double max_angle_deg = 60.0;
  double angle_step_deg = 2.0;
  double orientation_gate_deg = 10.0;
  double period_gate = 1.0;
  int threads = 1;  // theta slices run in parallel
};

struct SearchResult {
  RigidTransform transform;  // input -> reference
  int consistent = 0;        // blocks passing both gates
  int common = 0;            // blocks in the common region
};

/// Grid search for the rigid motion taking the input print onto the reference
/// that maximizes the number of common blocks agreeing in orientation and
/// period. Ties go to the smaller |theta|, then the smaller |t|.
/// Rotation centre is the centre of the input grid.
SearchResult rigid_search(const ridge::OrientationField& o_ref, const ridge::PeriodMap& p_ref,
                          const Mask& mask_ref, const ridge::OrientationField& o_in,
                          const ridge::PeriodMap& p_in, const Mask& mask_in,
                          const SearchOptions& opt = {});

/// Gather field on the reference grid: aligned = warp_backward(I, field).
DisplacementField rigid_field(const RigidTransform& t, int ref_w, int ref_h);

struct CoarseOptions {
  SearchOptions search;
  MatchOptions match;
  std::size_t min_pairs = 4;
};

struct CoarseResult {
  Image aligned;          // I resampled onto R's grid
  Mask aligned_mask;
  DisplacementField field;  // R grid -> I position offsets
  std::string path;       // "tps" or "rigid"
  std::size_t pairs = 0;
  nlohmann::json record;
};

/// Minutiae are extracted from the enhanced images unless given; masks come
/// from segmentation unless given.
CoarseResult coarse_align(const Image& input, const Image& ref, const CoarseOptions& opt = {},
                          const std::optional<std::vector<Minutia>>& minutiae_in = std::nullopt,
                          const std::optional<std::vector<Minutia>>& minutiae_ref = std::nullopt,
                          const std::optional<Mask>& mask_in = std::nullopt,
                          const std::optional<Mask>& mask_ref = std::nullopt);

}  // namespace pdr::coarse
