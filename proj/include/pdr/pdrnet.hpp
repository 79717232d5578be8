#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pdr/image.hpp"
#include "pdr/nn.hpp"

namespace pdr::net {

class NetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NetConfig {
  int base_channels = 16;
  int interaction_stages = 4;
  int intervals = 25;  // T, classes per axis
  double disp_range = 30.0;
  std::vector<int> aspp_dilations{1, 2, 4};  // plus a global-average branch
  double sigma_label = 2.0;
  double focal_alpha = 1.0;
  double focal_gamma = 2.0;
  // "multiclass": -sum_t y_t (1-p_t)^g log p_t. "binary": per-channel
  // q_t = y_t p_t + (1-y_t)(1-p_t) form; with sum-normalized labels whose
  // peak stays below 0.5 its minimum sits on the far, zero-label classes.
  std::string focal_form = "multiclass";
  double lambda_smooth = 1.0;
  // toy training
  double lr = 1e-2;
  double momentum = 0.9;
  int batch = 4;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static NetConfig from_json(const nlohmann::json& j);
  static NetConfig load(const std::string& path);
  /// base 8, two interaction stages: the size used for toy training.
  static NetConfig tiny();
};

/// Class centres z^t: T values evenly spaced on [-range, range], endpoints included.
struct ClassGrid {
  std::vector<double> centers;
  static ClassGrid make(int intervals, double range);
  double spacing() const { return centers.size() > 1 ? centers[1] - centers[0] : 0.0; }
  int size() const { return static_cast<int>(centers.size()); }
};

// A probability volume is an nn::Tensor of shape (N, 2T, H/8, W/8): channels
// [0, T) hold the x-axis distribution, [T, 2T) the y-axis one.

constexpr int kCellSize = 8;

/// Soft-argmax per cell and axis for batch item `item`, at 1/8 resolution
/// (scale 0.125). Throws if any distribution sums more than 1e-3 away from 1.
DisplacementField decode_cells(const nn::Tensor& vol, int item, const ClassGrid& grid);

/// decode_cells, TPS extrapolation over cells outside `overlap` (full-res
/// mask, a cell counts as overlap when at least half its pixels do), then
/// bilinear upsampling to full resolution.
DisplacementField decode_displacement(const nn::Tensor& vol, int item, const ClassGrid& grid,
                                      const Mask& overlap);

/// Gaussian interval labels for a cell-level field; values beyond the range
/// are clamped (the count of clamped values is added to *clamped if given).
nn::Tensor make_labels(const DisplacementField& cells, const ClassGrid& grid, double sigma,
                       std::size_t* clamped = nullptr);

/// Cell mask at 1/8 from a full-resolution mask (majority vote per cell).
Mask cell_mask(const Mask& full, int cell = kCellSize);

constexpr double kFocalFloor = 1e-7;

enum class FocalForm { Binary, Multiclass };
FocalForm parse_focal_form(const std::string& s);

/// Loss masks are (N, 1, h, w) tensors of 0/1 values. Sum over cells in the
/// mask and all 2T channels, divided by the masked cell count.
nn::Tensor focal_loss(const nn::Tensor& pred, const nn::Tensor& labels, const nn::Tensor& mask,
                      double alpha = 1.0, double gamma = 2.0, FocalForm form = FocalForm::Binary);
nn::Tensor smooth_loss(const nn::Tensor& pred, const nn::Tensor& mask);
nn::Tensor total_loss(const nn::Tensor& pred, const nn::Tensor& labels, const nn::Tensor& mask,
                      const NetConfig& cfg);

/// Intermediate maps kept for inspection.
struct Features {
  nn::Tensor correlation;  // correlation branch after the encoder, 1/8
  nn::Tensor texture;      // texture branch after the encoder, 1/16
  nn::Tensor fused;        // head input, 1/8
};

class PdrNet {
 public:
  PdrNet(const NetConfig& cfg, std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  const ClassGrid& grid() const { return grid_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  std::size_t conv_weight_count() const;

  /// texture: (N, 2, H, W) stacked enhanced images; psi: (N, 1, H, W).
  /// H and W must be multiples of 16. Returns the probability volume.
  nn::Tensor forward(const nn::Tensor& texture, const nn::Tensor& psi, nn::BnMode mode,
                     Features* features = nullptr);

 private:
  struct Conv {
    std::string name;
    int cin, cout, k, stride, dilation;
    bool bn;  // batch norm after the conv (no conv bias then)
  };
  Conv& conv(const std::string& name, int cin, int cout, int k, int stride = 1, int dilation = 1,
             bool bn = true);
  nn::Tensor apply(const Conv& c, const nn::Tensor& x, nn::BnMode mode);
  nn::Tensor residual(const std::string& prefix, const nn::Tensor& x, nn::BnMode mode);

  NetConfig cfg_;
  ClassGrid grid_;
  nn::ParamStore params_;
  std::vector<Conv> convs_;
  std::uint64_t seed_;
};

// ---- preprocessing + training ---------------------------------------------------

/// One registration example on a common grid. `gt` maps input -> reference
/// (only meaningful for training); `overlap` marks pixels of the input that are
/// foreground and land inside the reference.
struct TrainPair {
  Image input;
  Image ref;
  Mask input_mask;
  Mask ref_mask;
  DisplacementField gt;
  Mask overlap;
};

/// Network inputs derived from an image pair.
struct NetInputs {
  Image enh_input, enh_ref, psi;
  Mask common;
};

NetInputs prepare_inputs(const Image& input, const Image& ref, const Mask& input_mask,
                         const Mask& ref_mask);

/// Runs the network on one pair in eval mode.
struct Prediction {
  nn::Tensor volume;
  DisplacementField field;  // full resolution, input -> reference
  Features features;
};
Prediction predict(PdrNet& net, const NetInputs& in, const Mask& overlap);

/// Mean endpoint error over `mask`.
double endpoint_error(const DisplacementField& a, const DisplacementField& b, const Mask& mask);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double epe = 0.0;       // train-mode predictions, before extrapolation
  double zero_epe = 0.0;  // EPE of the all-zero field
};

struct TrainOptions {
  int epochs = 30;
  std::uint64_t seed = 1;
  std::function<void(const EpochLog&)> on_epoch;
  /// When set, epoch e trains on view(i, e) in place of data[i] (augmentation).
  std::function<TrainPair(std::size_t index, int epoch)> view;
};

struct TrainResult {
  std::vector<EpochLog> log;
};

TrainResult train_toy(PdrNet& net, const std::vector<TrainPair>& data, const TrainOptions& opts);

/// Mean EPE of eval-mode predictions over each pair's overlap, and the zero baseline.
struct EvalSummary {
  double epe = 0.0;
  double zero_epe = 0.0;
};
EvalSummary evaluate(PdrNet& net, const std::vector<TrainPair>& data);

}  // namespace pdr::net
