#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pdr/coarse.hpp"
#include "pdr/image.hpp"
#include "pdr/pdrnet.hpp"
#include "pdr/synth.hpp"

namespace pdr::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Normalized cross-correlation over M1 & M2 with masked means removed.
/// Throws "no overlap" for an empty common mask, "degenerate region" when
/// either image is constant there.
double ncc(const Image& a, const Image& b, const Mask& ma, const Mask& mb);

// ---- registration pipeline ----------------------------------------------------------

enum class Stage { Raw, Coarse, Fine };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

struct Pipeline {
  coarse::CoarseOptions coarse;
  net::PdrNet* net = nullptr;  // required for Stage::Fine
  /// Masks come from ridge segmentation unless supplied with the pair.
};

struct Registration {
  Image aligned;  // input on the reference grid after the last stage run
  Mask aligned_mask;
  Mask ref_mask;
  DisplacementField coarse_field;  // gather field: aligned(q) = input(q + coarse_field(q))
  DisplacementField fine_field;    // aligned -> reference, forward, on the reference grid
  net::Features features;          // fine stage only, padded to a multiple of 16
  nlohmann::json record;
  double score = 0.0;  // ncc(aligned, ref) at the requested stage
};

/// Runs the stages up to `stage`. Input and reference may differ in size; the
/// fine stage pads to a multiple of 16 internally.
Registration register_pair(const Image& input, const Image& ref, Stage stage, const Pipeline& pipe,
                           const std::optional<Mask>& input_mask = std::nullopt,
                           const std::optional<Mask>& ref_mask = std::nullopt,
                           const std::optional<std::vector<coarse::Minutia>>& minutiae_in = std::nullopt,
                           const std::optional<std::vector<coarse::Minutia>>& minutiae_ref = std::nullopt);

// ---- protocols and scores -----------------------------------------------------------

enum class Label { Genuine, Imposter };
std::string to_string(Label l);
Label parse_label(const std::string& s);

constexpr double kFailureScore = -2.0;

struct ScoreRecord {
  std::string probe;
  std::string gallery;
  Label label = Label::Genuine;
  Stage stage = Stage::Raw;
  double score = 0.0;
  bool failed = false;
  std::string error;  // reason when failed; not written to CSV
};

// probe,gallery,label,stage,score. Failures carry kFailureScore.
void write_scores(std::ostream& out, const std::vector<ScoreRecord>& recs);
std::vector<ScoreRecord> read_scores(std::istream& in);

/// manifest.json: {"fingers": [{"id": "...", "impressions": ["a.pgm", ...],
///                 "minutiae": ["a.mnt", ...]}]}; paths relative to the manifest.
struct Finger {
  std::string id;
  std::vector<std::string> impressions;
  std::vector<std::string> minutiae;  // empty or one per impression
};
struct Manifest {
  std::string root;
  std::vector<Finger> fingers;
};
Manifest read_protocol_manifest(const std::string& path);

struct ProtocolSpec {
  enum class Genuine { None, AllPairs, FirstVsRest };
  enum class Imposter { None, FirstImpressions };
  Genuine genuine = Genuine::AllPairs;
  Imposter imposter = Imposter::FirstImpressions;
  bool suppress_symmetric = true;  // (a, b) and (b, a) counted once

  static ProtocolSpec from_json(const nlohmann::json& j);
};

struct PairJob {
  std::size_t probe_finger = 0, probe_index = 0;
  std::size_t gallery_finger = 0, gallery_index = 0;
  Label label = Label::Genuine;
};
std::vector<PairJob> make_pairs(const Manifest& m, const ProtocolSpec& spec);
std::string impression_id(const Manifest& m, std::size_t finger, std::size_t index);

/// Every job yields a record; failures get kFailureScore and failed = true.
std::vector<ScoreRecord> run_protocol(const Manifest& m, const ProtocolSpec& spec, Stage stage,
                                      const Pipeline& pipe, int threads = 1);

// ---- rates -----------------------------------------------------------------------

struct DetPoint {
  double threshold;  // accept when score >= threshold
  double fmr;
  double fnmr;
};

struct Rates {
  double eer = 0.0;
  double tar_at_far = 0.0;  // FAR = 0.1 %
  double zero_fmr = 0.0;
  std::vector<DetPoint> det;
};

Rates compute_rates(const std::vector<ScoreRecord>& recs, double far = 1e-3);

/// cmc[k-1] = fraction of probes whose mate ranks <= k; ties rank the mate last.
std::vector<double> compute_cmc(const std::vector<ScoreRecord>& recs);

void write_det(std::ostream& out, const std::vector<DetPoint>& det);
void write_cmc(std::ostream& out, const std::vector<double>& cmc);

// ---- toy training experiment --------------------------------------------------------------

net::TrainPair to_train_pair(const synth::TrainSample& s);

/// Training view for net::TrainOptions::view: with probability `prob`, pair i
/// in a given epoch is a random flip / rot90 / swap of samples[i], else pairs[i].
/// Both vectors must outlive the returned function.
std::function<net::TrainPair(std::size_t, int)> augmented_views(const std::vector<synth::TrainSample>& samples,
                                                                 const std::vector<net::TrainPair>& pairs,
                                                                 double prob, std::uint64_t seed);

struct ToyOptions {
  int train_pairs = 200;
  int heldout_pairs = 50;
  int size = 64;
  double magnitude = 12.0;
  int grid = 4;
  int epochs = 30;
  std::uint64_t seed = 1;
  // Each pair is replaced, per epoch and with this probability, by a random
  // flip / rot90 / swap view. 0 trains on the stored pairs only.
  double augment_prob = 0.5;
  net::NetConfig config;  // the caller sets the tiny sizes
  std::function<void(const net::EpochLog&)> on_epoch;
};

struct HeldoutPair {
  double ncc_coarse = 0.0;
  double ncc_fine = 0.0;
  double epe = 0.0;
  double zero_epe = 0.0;
  std::string coarse_path;
};

struct ToyReport {
  std::vector<net::EpochLog> log;
  net::EvalSummary final_train;  // trained model, eval mode, over the training pairs
  std::vector<HeldoutPair> heldout;
  double seconds = 0.0;
  double fine_wins() const;  // fraction of held-out pairs with ncc_fine > ncc_coarse
};

/// Generates the data, trains a fresh network, then registers each held-out
/// pair coarse-only and coarse + fine. `net_out` receives the trained model.
ToyReport run_toy(const ToyOptions& opt, net::PdrNet* net_out = nullptr);

}  // namespace pdr::eval
