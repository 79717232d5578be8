// pdreg: command-line front end for the registration pipeline.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pdr/coarse.hpp"
#include "pdr/eval.hpp"
#include "pdr/imageio.hpp"
#include "pdr/nn.hpp"
#include "pdr/pdrnet.hpp"
#include "pdr/ridge.hpp"
#include "pdr/synth.hpp"

namespace fs = std::filesystem;
using namespace pdr;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  std::string config;
  int threads = 1;
};

// Exit codes.
constexpr int kOk = 0;
constexpr int kFatal = 1;
constexpr int kPairFailures = 2;

struct Fatal : std::runtime_error {
  using std::runtime_error::runtime_error;
};

net::NetConfig load_config(const Globals& g, const net::NetConfig& fallback) {
  return g.config.empty() ? fallback : net::NetConfig::load(g.config);
}

// train-toy writes the config next to the weights so later verbs rebuild the same shapes.
std::string sidecar(const std::string& weights) { return weights + ".json"; }

net::NetConfig config_for_weights(const Globals& g, const std::string& weights) {
  if (!g.config.empty()) return net::NetConfig::load(g.config);
  if (fs::exists(sidecar(weights))) return net::NetConfig::load(sidecar(weights));
  return net::NetConfig{};
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path);
  os << j.dump(2) << "\n";
  if (!os) throw Fatal("cannot write " + path);
}

template <typename Fn>
void write_text(const std::string& path, Fn&& fn) {
  std::ofstream os(path);
  fn(os);
  if (!os) throw Fatal("cannot write " + path);
}

std::optional<std::vector<coarse::Minutia>> maybe_minutiae(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return coarse::read_minutiae_file(path).points;
}

coarse::CoarseOptions coarse_options(const Globals& g) {
  coarse::CoarseOptions o;
  o.search.threads = g.threads;
  return o;
}

// ---- enhance -------------------------------------------------------------------------

struct EnhanceArgs {
  std::string input, out, orientation, period, mask;
};

int cmd_enhance(const EnhanceArgs& a) {
  const Image img = io::read_pgm(a.input);
  const ridge::RidgeFeatures f = ridge::analyze(img);
  const ridge::EnhanceResult e = ridge::enhance_and_phase(img, f.orientation, f.period, f.mask);
  // Enhanced values are z-scores clamped to [-3, 3]; stored as gray with ridges dark.
  Image gray(img.width(), img.height(), 255.0);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      if (f.mask(x, y)) gray(x, y) = std::clamp(std::round(127.5 + 42.5 * e.enhanced(x, y)), 0.0, 255.0);
  io::write_pgm(a.out, gray);
  if (!a.orientation.empty()) write_text(a.orientation, [&](std::ostream& os) { ridge::write_orientation(os, f.orientation); });
  if (!a.period.empty()) write_text(a.period, [&](std::ostream& os) { ridge::write_period(os, f.period); });
  if (!a.mask.empty()) io::write_mask_pgm(a.mask, f.mask);
  return kOk;
}

// ---- phase ----------------------------------------------------------------------------

struct PhaseArgs {
  std::string input, ref, out, mask;
};

int cmd_phase(const PhaseArgs& a) {
  const Image in = io::read_pgm(a.input);
  if (a.ref.empty()) {
    const ridge::RidgeFeatures f = ridge::analyze(in);
    const ridge::EnhanceResult e = ridge::enhance_and_phase(in, f.orientation, f.period, f.mask);
    io::write_phase(a.out, e.phase);
    if (!a.mask.empty()) io::write_mask_pgm(a.mask, f.mask);
    return kOk;
  }
  const ridge::PreprocessedPair p = ridge::preprocess_pair(in, io::read_pgm(a.ref));
  if (p.empty_overlap) throw Fatal("no overlap between the masks");
  io::write_phase(a.out, p.psi);
  if (!a.mask.empty()) io::write_mask_pgm(a.mask, mask_and(p.mask_input, p.mask_ref));
  return kOk;
}

// ---- coarse ----------------------------------------------------------------------------

struct CoarseArgs {
  std::string input, ref, minutiae_a, minutiae_b, out, record, field;
};

int cmd_coarse(const Globals& g, const CoarseArgs& a) {
  const coarse::CoarseResult r = coarse::coarse_align(io::read_pgm(a.input), io::read_pgm(a.ref), coarse_options(g),
                                                      maybe_minutiae(a.minutiae_a), maybe_minutiae(a.minutiae_b));
  io::write_pgm(a.out, r.aligned);
  if (!a.record.empty()) write_json(a.record, r.record);
  if (!a.field.empty()) io::write_field(a.field, r.field);
  return kOk;
}

// ---- register ----------------------------------------------------------------------------

struct RegisterArgs {
  std::string input, ref, weights, out, warped, dump, record, coarse_field, minutiae_a, minutiae_b;
};

void dump_tensor(const fs::path& dir, const std::string& name, const nn::Tensor& t) {
  if (!t.defined()) return;
  const nn::Shape& s = t.shape();
  for (int c = 0; c < s.c; ++c) {
    Grid<double> g(s.w, s.h);
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) g(x, y) = t.at(0, c, y, x);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_c%03d.phas", name.c_str(), c);
    io::write_phase((dir / buf).string(), g);
  }
}

int cmd_register(const Globals& g, const RegisterArgs& a) {
  net::PdrNet model(config_for_weights(g, a.weights), g.seed);
  model.params().load(a.weights);
  eval::Pipeline pipe;
  pipe.coarse = coarse_options(g);
  pipe.net = &model;
  const eval::Registration r =
      eval::register_pair(io::read_pgm(a.input), io::read_pgm(a.ref), eval::Stage::Fine, pipe, std::nullopt,
                          std::nullopt, maybe_minutiae(a.minutiae_a), maybe_minutiae(a.minutiae_b));
  io::write_field(a.out, r.fine_field);
  if (!a.warped.empty()) io::write_pgm(a.warped, r.aligned);
  if (!a.record.empty()) write_json(a.record, r.record);
  if (!a.coarse_field.empty()) io::write_field(a.coarse_field, r.coarse_field);
  if (!a.dump.empty()) {
    fs::create_directories(a.dump);
    dump_tensor(a.dump, "correlation", r.features.correlation);
    dump_tensor(a.dump, "texture", r.features.texture);
    dump_tensor(a.dump, "fused", r.features.fused);
  }
  return kOk;
}

// ---- warp ----------------------------------------------------------------------------

struct WarpArgs {
  std::string input, field, out;
  bool forward = false;
  double fill = 255.0;
};

int cmd_warp(const WarpArgs& a) {
  const Image img = io::read_pgm(a.input);
  DisplacementField f = io::read_field(a.field);
  if (f.scale != 1.0) f = resize_bilinear(f, img.width(), img.height());
  if (f.width() != img.width() || f.height() != img.height()) throw Fatal("field and image sizes differ");
  io::write_pgm(a.out, a.forward ? warp_forward(img, f, a.fill).image : warp_backward(img, f, a.fill));
  return kOk;
}

// ---- synth ----------------------------------------------------------------------------

struct SynthArgs {
  int count = 1, size = 64, grid = 4;
  double magnitude = 12.0;
  std::string out;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  synth::DatasetSpec spec;
  spec.count = a.count;
  spec.size = a.size;
  spec.magnitude = a.magnitude;
  spec.grid = a.grid;
  spec.seed = g.seed;
  synth::write_dataset(a.out, spec);
  return kOk;
}

// ---- train-toy ----------------------------------------------------------------------

struct TrainArgs {
  std::string data, weights, log;
  int count = 200, size = 64, grid = 4, epochs = 30;
  double magnitude = 12.0;
  double augment_prob = 0.5;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  std::vector<synth::TrainSample> samples;
  if (!a.data.empty()) {
    samples = synth::read_dataset(a.data);
  } else {
    for (int i = 0; i < a.count; ++i)
      samples.push_back(synth::generate_sample(a.size, a.magnitude, a.grid, synth::mix_seed(g.seed, i)));
  }
  std::vector<net::TrainPair> pairs;
  for (const auto& s : samples) pairs.push_back(eval::to_train_pair(s));
  net::PdrNet model(load_config(g, net::NetConfig::tiny()), g.seed);
  net::TrainOptions to;
  to.epochs = a.epochs;
  to.seed = g.seed;
  if (a.augment_prob > 0.0) to.view = eval::augmented_views(samples, pairs, a.augment_prob, g.seed);
  to.on_epoch = [](const net::EpochLog& l) {
    std::fprintf(stderr, "epoch %3d  loss %.5f  epe %.4f  zero %.4f\n", l.epoch, l.loss, l.epe, l.zero_epe);
  };
  const net::TrainResult tr = net::train_toy(model, pairs, to);
  const net::EvalSummary fin = net::evaluate(model, pairs);
  model.params().save(a.weights);
  write_json(sidecar(a.weights), model.config().to_json());
  if (!a.log.empty()) {
    write_text(a.log, [&](std::ostream& os) {
      os << "epoch,loss,epe,zero_epe\n" << std::setprecision(17);
      for (const auto& l : tr.log) os << l.epoch << ',' << l.loss << ',' << l.epe << ',' << l.zero_epe << '\n';
      os << "final,," << fin.epe << ',' << fin.zero_epe << '\n';
    });
  }
  std::fprintf(stderr, "final eval epe %.4f  zero %.4f\n", fin.epe, fin.zero_epe);
  return kOk;
}

// ---- gradcheck ----------------------------------------------------------------------

struct GradArgs {
  std::string out;
  int size = 32;
};

nn::Tensor random_tensor(nn::Shape s, std::mt19937_64& rng, bool grad = true) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(s.n) * s.c * s.h * s.w);
  for (auto& x : v) x = u(rng);
  return nn::Tensor::from(s, std::move(v), grad);
}

int cmd_gradcheck(const Globals& g, const GradArgs& a) {
  if (a.size < 16 || a.size % 16 != 0) throw Fatal("--size must be a positive multiple of 16");
  net::NetConfig base;
  base.base_channels = 2;
  base.interaction_stages = 1;
  net::NetConfig cfg = load_config(g, base);
  std::mt19937_64 rng(g.seed);
  nlohmann::json report = nlohmann::json::object();
  double worst = 0.0;
  auto record = [&](const std::string& name, double err) {
    report["checks"][name] = err;
    worst = std::max(worst, err);
  };

  {
    nn::Tensor x = random_tensor({1, 2, 7, 6}, rng), k = random_tensor({3, 2, 3, 3}, rng),
               b = random_tensor({1, 3, 1, 1}, rng);
    const nn::Tensor w = random_tensor({1, 3, 4, 3}, rng, false);
    record("conv2d", nn::grad_check([&] { return nn::sum(nn::mul(nn::conv2d(x, k, b, {2, 1, 1}), w)); }, {x, k, b}));
  }
  {
    nn::Tensor x = random_tensor({2, 3, 4, 4}, rng), s = random_tensor({1, 3, 1, 1}, rng),
               t = random_tensor({1, 3, 1, 1}, rng);
    nn::Tensor rm = nn::Tensor::zeros({1, 3, 1, 1}), rv = nn::Tensor::full({1, 3, 1, 1}, 1.0);
    const nn::Tensor w = random_tensor(x.shape(), rng, false);
    record("batchnorm", nn::grad_check([&] { return nn::sum(nn::mul(nn::batchnorm(x, s, t, rm, rv, nn::BnMode::Train), w)); },
                                       {x, s, t}));
  }
  {
    nn::Tensor x = random_tensor({1, 6, 3, 3}, rng);
    const nn::Tensor w1 = random_tensor(x.shape(), rng, false);
    record("softmax_channels", nn::grad_check([&] { return nn::sum(nn::mul(nn::softmax_channels(x, 3), w1)); }, {x}));
    const nn::Tensor w2 = random_tensor({1, 6, 5, 4}, rng, false);
    record("resize_bilinear", nn::grad_check([&] { return nn::sum(nn::mul(nn::resize_bilinear(x, 5, 4), w2)); }, {x}));
  }

  // Whole network through the total loss on one toy instance.
  net::PdrNet model(cfg, g.seed);
  const int cells = a.size / net::kCellSize;
  const nn::Tensor tex = random_tensor({1, 2, a.size, a.size}, rng, false);
  const nn::Tensor psi = random_tensor({1, 1, a.size, a.size}, rng, false);
  DisplacementField z(cells, cells, 1.0 / net::kCellSize);
  std::uniform_real_distribution<double> u(-25.0, 25.0);
  for (auto& v : z.dx.data()) v = u(rng);
  for (auto& v : z.dy.data()) v = u(rng);
  const nn::Tensor labels = net::make_labels(z, model.grid(), cfg.sigma_label);
  const nn::Tensor mask = nn::Tensor::full({1, 1, cells, cells}, 1.0);
  // An untrained head is near-uniform, so neighbouring cells tie to ~1e-7 and most stencils
  // would straddle a kink of the smooth term. Peak it like a trained head.
  for (auto& v : model.params().get("out.k").data()) v *= 10.0;
  {
    const nn::Tensor vol = model.forward(tex, psi, nn::BnMode::Train);
    const auto s = vol.shape();
    double margin = 1e300;
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          if (x + 1 < s.w) margin = std::min(margin, std::fabs(vol.at(0, c, y, x + 1) - vol.at(0, c, y, x)));
          if (y + 1 < s.h) margin = std::min(margin, std::fabs(vol.at(0, c, y + 1, x) - vol.at(0, c, y, x)));
        }
    report["min_neighbour_gap"] = margin;
  }
  std::vector<nn::Tensor> params;
  for (const auto& p : model.params().params())
    if (p.trainable) params.push_back(p.tensor);
  nn::GradCheckStats st;
  record("total_loss", nn::grad_check(
                           [&] { return net::total_loss(model.forward(tex, psi, nn::BnMode::Train), labels, mask, cfg); },
                           params, 1e-5, 400, g.seed, &st));
  report["total_loss_coords"] = {{"checked", st.checked}, {"refined", st.refined}, {"skipped", st.skipped}};
  const bool enough = st.skipped * 10 <= st.checked + st.skipped;

  report["max_relative_error"] = worst;
  report["tolerance"] = 1e-4;
  report["pass"] = worst < 1e-4 && enough;
  const std::string text = report.dump(2);
  if (a.out.empty())
    std::cout << text << "\n";
  else
    write_json(a.out, report);
  if (worst >= 1e-4) throw Fatal("gradient check failed");
  if (!enough) throw Fatal("gradient check inconclusive: over 10% of coordinates sit on kinks");
  return kOk;
}

// ---- eval ----------------------------------------------------------------------------

struct EvalArgs {
  std::string manifest, protocol, stage = "coarse", weights, out;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const eval::Manifest m = eval::read_protocol_manifest(a.manifest);
  eval::ProtocolSpec spec;
  if (!a.protocol.empty()) {
    std::ifstream is(a.protocol);
    if (!is) throw Fatal("cannot read " + a.protocol);
    spec = eval::ProtocolSpec::from_json(nlohmann::json::parse(is));
  }
  const eval::Stage stage = eval::parse_stage(a.stage);
  eval::Pipeline pipe;
  pipe.coarse = coarse_options(g);
  std::optional<net::PdrNet> model;
  if (stage == eval::Stage::Fine) {
    if (a.weights.empty()) throw Fatal("--weights is required for the fine stage");
    model.emplace(config_for_weights(g, a.weights), g.seed);
    model->params().load(a.weights);
    pipe.net = &*model;
  } else {
    // Pairs run in parallel here, so each search stays serial.
    pipe.coarse.search.threads = 1;
  }
  const auto recs = eval::run_protocol(m, spec, stage, pipe, g.threads);
  write_text(a.out, [&](std::ostream& os) { eval::write_scores(os, recs); });
  std::size_t failed = 0;
  for (const auto& r : recs)
    if (r.failed) {
      ++failed;
      std::fprintf(stderr, "failed %s vs %s: %s\n", r.probe.c_str(), r.gallery.c_str(), r.error.c_str());
    }
  std::fprintf(stderr, "%zu pairs, %zu failed\n", recs.size(), failed);
  return failed ? kPairFailures : kOk;
}

// ---- rates ----------------------------------------------------------------------------

struct RatesArgs {
  std::string scores, out, det, cmc, stage;
  double far = 1e-3;
};

int cmd_rates(const RatesArgs& a) {
  std::ifstream is(a.scores);
  if (!is) throw Fatal("cannot read " + a.scores);
  std::vector<eval::ScoreRecord> recs = eval::read_scores(is);
  if (!a.stage.empty()) {
    const eval::Stage s = eval::parse_stage(a.stage);
    std::erase_if(recs, [&](const eval::ScoreRecord& r) { return r.stage != s; });
  }
  const eval::Rates r = eval::compute_rates(recs, a.far);
  std::size_t failed = 0;
  for (const auto& x : recs) failed += x.score == eval::kFailureScore;
  nlohmann::json j = {{"pairs", recs.size()},   {"failures", failed},         {"eer", r.eer},
                      {"far", a.far},           {"tar_at_far", r.tar_at_far}, {"zero_fmr", r.zero_fmr}};
  if (!a.cmc.empty()) {
    const std::vector<double> cmc = eval::compute_cmc(recs);
    j["rank1"] = cmc.empty() ? 0.0 : cmc.front();
    write_text(a.cmc, [&](std::ostream& os) { eval::write_cmc(os, cmc); });
  }
  if (!a.det.empty()) write_text(a.det, [&](std::ostream& os) { eval::write_det(os, r.det); });
  if (a.out.empty())
    std::cout << j.dump(2) << "\n";
  else
    write_json(a.out, j);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pdreg: fingerprint registration by phase-aided dense displacement"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--config", g.config, "network config JSON (missing keys keep defaults)")->check(CLI::ExistingFile);
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();

  EnhanceArgs ea;
  auto* enh = app.add_subcommand("enhance", "Gabor-enhance an image");
  enh->add_option("--input", ea.input)->required()->check(CLI::ExistingFile);
  enh->add_option("--out", ea.out, "enhanced PGM")->required();
  enh->add_option("--orientation", ea.orientation, "orientation text grid");
  enh->add_option("--period", ea.period, "period text grid");
  enh->add_option("--mask", ea.mask, "segmentation mask PGM");

  PhaseArgs pa;
  auto* ph = app.add_subcommand("phase", "ridge phase of one image, or the phase difference of a pair");
  ph->add_option("--input", pa.input)->required()->check(CLI::ExistingFile);
  ph->add_option("--ref", pa.ref)->check(CLI::ExistingFile);
  ph->add_option("--out", pa.out, "PHAS map")->required();
  ph->add_option("--mask", pa.mask, "mask PGM where the map is defined");

  CoarseArgs ca;
  auto* co = app.add_subcommand("coarse", "minutiae/TPS or rigid alignment onto the reference grid");
  co->add_option("--input", ca.input)->required()->check(CLI::ExistingFile);
  co->add_option("--ref", ca.ref)->required()->check(CLI::ExistingFile);
  co->add_option("--minutiae-a", ca.minutiae_a)->check(CLI::ExistingFile);
  co->add_option("--minutiae-b", ca.minutiae_b)->check(CLI::ExistingFile);
  co->add_option("--out", ca.out, "aligned PGM")->required();
  co->add_option("--record", ca.record, "JSON record");
  co->add_option("--field", ca.field, "gather field on the reference grid");

  RegisterArgs ra;
  auto* re = app.add_subcommand("register", "coarse + dense registration");
  re->add_option("--input", ra.input)->required()->check(CLI::ExistingFile);
  re->add_option("--ref", ra.ref)->required()->check(CLI::ExistingFile);
  re->add_option("--weights", ra.weights)->required()->check(CLI::ExistingFile);
  re->add_option("--out", ra.out, "dense field, coarse-aligned input -> reference")->required();
  re->add_option("--warped", ra.warped, "fully registered input");
  re->add_option("--dump-features", ra.dump, "directory for feature maps");
  re->add_option("--record", ra.record, "JSON record");
  re->add_option("--coarse-field", ra.coarse_field, "coarse gather field");
  re->add_option("--minutiae-a", ra.minutiae_a)->check(CLI::ExistingFile);
  re->add_option("--minutiae-b", ra.minutiae_b)->check(CLI::ExistingFile);

  WarpArgs wa;
  auto* wp = app.add_subcommand("warp", "apply a displacement field");
  wp->add_option("--input", wa.input)->required()->check(CLI::ExistingFile);
  wp->add_option("--field", wa.field)->required()->check(CLI::ExistingFile);
  wp->add_option("--out", wa.out)->required();
  wp->add_flag("--forward", wa.forward, "scatter along the field instead of gathering");
  wp->add_option("--fill", wa.fill)->capture_default_str();

  SynthArgs sa;
  auto* sy = app.add_subcommand("synth", "write a synthetic training set");
  sy->add_option("--count", sa.count)->required()->check(CLI::PositiveNumber);
  sy->add_option("--size", sa.size)->capture_default_str();
  sy->add_option("--magnitude", sa.magnitude)->capture_default_str();
  sy->add_option("--grid", sa.grid)->capture_default_str();
  sy->add_option("--out", sa.out)->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train-toy", "train on synthetic pairs (tiny network unless --config)");
  tr->add_option("--data", ta.data, "dataset written by synth; generated in memory if omitted");
  tr->add_option("--count", ta.count)->capture_default_str();
  tr->add_option("--size", ta.size)->capture_default_str();
  tr->add_option("--magnitude", ta.magnitude)->capture_default_str();
  tr->add_option("--grid", ta.grid)->capture_default_str();
  tr->add_option("--epochs", ta.epochs)->capture_default_str();
  tr->add_option("--weights", ta.weights, "output weights")->required();
  tr->add_option("--log", ta.log, "per-epoch CSV");
  tr->add_option("--augment-prob", ta.augment_prob, "chance a pair is replaced by a flip/rot90/swap view each epoch")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();

  GradArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of ops and the full loss");
  gc->add_option("--size", ga.size)->capture_default_str();
  gc->add_option("--out", ga.out, "JSON report (stdout if omitted)");

  EvalArgs va;
  auto* ev = app.add_subcommand("eval", "score a protocol");
  ev->add_option("--manifest", va.manifest)->required()->check(CLI::ExistingFile);
  ev->add_option("--protocol", va.protocol)->check(CLI::ExistingFile);
  ev->add_option("--stage", va.stage, "raw, coarse or fine")->capture_default_str();
  ev->add_option("--weights", va.weights)->check(CLI::ExistingFile);
  ev->add_option("--out", va.out, "scores CSV")->required();

  RatesArgs rta;
  auto* rt = app.add_subcommand("rates", "EER, TAR, ZeroFMR, DET and CMC from a scores CSV");
  rt->add_option("--scores", rta.scores)->required()->check(CLI::ExistingFile);
  rt->add_option("--out", rta.out, "JSON summary (stdout if omitted)");
  rt->add_option("--det", rta.det, "DET CSV");
  rt->add_option("--cmc", rta.cmc, "CMC CSV");
  rt->add_option("--stage", rta.stage, "only records of this stage");
  rt->add_option("--far", rta.far)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kFatal;
  }

  try {
    if (*enh) return cmd_enhance(ea);
    if (*ph) return cmd_phase(pa);
    if (*co) return cmd_coarse(g, ca);
    if (*re) return cmd_register(g, ra);
    if (*wp) return cmd_warp(wa);
    if (*sy) return cmd_synth(g, sa);
    if (*tr) return cmd_train(g, ta);
    if (*gc) return cmd_gradcheck(g, ga);
    if (*ev) return cmd_eval(g, va);
    if (*rt) return cmd_rates(rta);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "pdreg: %s\n", e.what());
    return kFatal;
  }
  return kFatal;
}
