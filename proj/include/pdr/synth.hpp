#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pdr/image.hpp"

namespace pdr::synth {

class SynthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic 64-bit seed mixing (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// ---- phantom fingerprints ------------------------------------------------------------

struct PhantomParams {
  int width = 256;
  int height = 256;
  int cores = 1;             // 1 = loop, 2 = whorl
  bool finger_mask = true;   // elliptical print on a white background; false = full frame
  double period_min = 8.0;
  double period_max = 11.0;
  double contrast = 60.0;    // ridge amplitude in gray levels
  double noise = 1.0;        // gray-level std added at the end
  int iterations = 6;
};

struct Phantom {
  Image image;  // 0..255, ridges dark
  Mask mask;    // foreground
};

/// Ridge pattern grown from seeded noise by repeated oriented band-pass
/// filtering along a core/delta orientation model and a slowly varying period.
Phantom make_phantom(const PhantomParams& p, std::uint64_t seed);

/// Random parameters (core placement, pattern class, period range) for a
/// full-frame training crop.
Phantom make_training_phantom(int size, std::uint64_t seed);

// ---- distortion fields and pairs ----------------------------------------------------------

constexpr double kMaxMagnitude = 30.0;

/// Local area change allowed in generated fields (det of d(p + D)/dp).
constexpr double kMinJacobian = 0.8;
constexpr double kMaxJacobian = 1.0 / kMinJacobian;

/// grid x grid control points over the frame, targets offset by Gaussian noise
/// (std magnitude/2, clipped at magnitude), TPS-interpolated and clipped again.
/// The deviation from the mean shift is shrunk until the Jacobian determinant
/// lies in [kMinJacobian, kMaxJacobian].
DisplacementField random_tps_field(int w, int h, double magnitude, int grid, std::uint64_t seed);

/// Min and max Jacobian determinant of p -> p + D(p) (central differences).
std::pair<double, double> jacobian_range(const DisplacementField& d);

/// I' = warp_forward(I, D): I(p) lands on I'(p + D(p)). F maps I -> I' on I's
/// grid, F' maps I' -> I on I''s grid.
struct TrainSample {
  Image I, Iprime;
  DisplacementField F, Fprime;
  Mask mask, mask_prime;
};

constexpr double kFill = 255.0;

TrainSample synthesize_pair(const Image& I, const DisplacementField& D, const Mask& mask);

enum class Augment { Flip, Rot90, Rot180, Rot270, Swap };
Augment parse_augment(const std::string& name);
std::string to_string(Augment a);
TrainSample augment(const TrainSample& s, Augment op);
/// Flip and swap each with probability 1/2, rotation uniform over 0/90/180/270.
TrainSample random_augment(const TrainSample& s, std::uint64_t seed);

/// Pixels of I that are foreground, at least `margin` from the border, and
/// whose target p + F(p) reads only covered pixels of I'.
Mask consistency_region(const TrainSample& s, int margin = 2);

/// Mean |warp_backward(I', F) - I| over consistency_region.
double consistency_error(const TrainSample& s, int margin = 2);

/// Full generation recipe for one training sample.
TrainSample generate_sample(int size, double magnitude, int grid, std::uint64_t seed);

// ---- dataset on disk ------------------------------------------------------------------------

struct DatasetSpec {
  int count = 0;
  int size = 64;
  double magnitude = 12.0;
  int grid = 4;
  std::uint64_t seed = 1;
};

/// <dir>/I.pgm, Iprime.pgm, F.dfld, Fprime.dfld, mask.pgm, maskprime.pgm
void write_sample(const std::string& dir, const TrainSample& s);
TrainSample read_sample(const std::string& dir);

/// Writes count samples plus manifest.json; returns the manifest.
nlohmann::json write_dataset(const std::string& root, const DatasetSpec& spec);
nlohmann::json read_manifest(const std::string& root);
std::vector<TrainSample> read_dataset(const std::string& root);

}  // namespace pdr::synth
