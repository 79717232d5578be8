#include "pdr/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "pdr/imageio.hpp"
#include "pdr/ridge.hpp"

namespace pdr::eval {

double ncc(const Image& a, const Image& b, const Mask& ma, const Mask& mb) {
  if (!a.same_shape(b) || !a.same_shape(ma) || !a.same_shape(mb))
    throw EvalError("ncc: images and masks must share one grid");
  double sa = 0, sb = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (ma.data()[i] && mb.data()[i]) {
      sa += a.data()[i];
      sb += b.data()[i];
      ++n;
    }
  if (n == 0) throw EvalError("no overlap");
  const double mean_a = sa / n, mean_b = sb / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (ma.data()[i] && mb.data()[i]) {
      const double da = a.data()[i] - mean_a, db = b.data()[i] - mean_b;
      sab += da * db;
      saa += da * da;
      sbb += db * db;
    }
  // Rounding in the mean leaves ~1e-30 residue on constant regions.
  const double tiny = 1e-20 * n;
  if (saa <= tiny * (1 + mean_a * mean_a) || sbb <= tiny * (1 + mean_b * mean_b))
    throw EvalError("degenerate region");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Raw:
      return "raw";
    case Stage::Coarse:
      return "coarse";
    case Stage::Fine:
      return "fine";
  }
  return "raw";
}

Stage parse_stage(const std::string& s) {
  if (s == "raw") return Stage::Raw;
  if (s == "coarse") return Stage::Coarse;
  if (s == "fine") return Stage::Fine;
  throw EvalError("unknown stage '" + s + "'");
}

std::string to_string(Label l) { return l == Label::Genuine ? "genuine" : "imposter"; }

Label parse_label(const std::string& s) {
  if (s == "genuine") return Label::Genuine;
  if (s == "imposter") return Label::Imposter;
  throw EvalError("unknown label '" + s + "'");
}

// ---- registration -----------------------------------------------------------------------

namespace {

template <typename T>
Grid<T> pad16(const Grid<T>& g, T fill) {
  const int w = (g.width() + 15) / 16 * 16, h = (g.height() + 15) / 16 * 16;
  if (w == g.width() && h == g.height()) return g;
  Grid<T> out(w, h, fill);
  for (int y = 0; y < g.height(); ++y)
    for (int x = 0; x < g.width(); ++x) out(x, y) = g(x, y);
  return out;
}

DisplacementField crop(const DisplacementField& f, int w, int h) {
  if (f.width() == w && f.height() == h) return f;
  DisplacementField out(w, h, f.scale);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      out.dx(x, y) = f.dx(x, y);
      out.dy(x, y) = f.dy(x, y);
    }
  return out;
}

}  // namespace

Registration register_pair(const Image& input, const Image& ref, Stage stage, const Pipeline& pipe,
                           const std::optional<Mask>& input_mask, const std::optional<Mask>& ref_mask,
                           const std::optional<std::vector<coarse::Minutia>>& minutiae_in,
                           const std::optional<std::vector<coarse::Minutia>>& minutiae_ref) {
  if (stage == Stage::Fine && pipe.net == nullptr) throw EvalError("fine stage needs a network");
  Registration r;
  const Mask im = input_mask ? *input_mask : ridge::segment_mask(input);
  r.ref_mask = ref_mask ? *ref_mask : ridge::segment_mask(ref);
  r.record["stage"] = to_string(stage);

  if (stage == Stage::Raw) {
    if (!input.same_shape(ref)) throw EvalError("raw stage needs equal image sizes");
    r.aligned = input;
    r.aligned_mask = im;
    r.score = ncc(r.aligned, ref, r.aligned_mask, r.ref_mask);
    r.record["ncc"]["raw"] = r.score;
    return r;
  }

  coarse::CoarseResult c =
      coarse::coarse_align(input, ref, pipe.coarse, minutiae_in, minutiae_ref, im, r.ref_mask);
  r.aligned = std::move(c.aligned);
  r.aligned_mask = std::move(c.aligned_mask);
  r.coarse_field = std::move(c.field);
  r.record["coarse"] = c.record;
  r.score = ncc(r.aligned, ref, r.aligned_mask, r.ref_mask);
  r.record["ncc"]["coarse"] = r.score;
  if (stage == Stage::Coarse) return r;

  const int w = ref.width(), h = ref.height();
  const net::NetInputs in = net::prepare_inputs(pad16(r.aligned, 255.0), pad16(ref, 255.0),
                                                pad16<std::uint8_t>(r.aligned_mask, 0),
                                                pad16<std::uint8_t>(r.ref_mask, 0));
  if (count(in.common) == 0) throw EvalError("no overlap");
  const net::Prediction p = net::predict(*pipe.net, in, in.common);
  r.fine_field = crop(p.field, w, h);
  r.features = p.features;
  r.aligned = warp_forward(r.aligned, r.fine_field, 255.0).image;
  r.aligned_mask = warp_forward(r.aligned_mask, r.fine_field);
  r.score = ncc(r.aligned, ref, r.aligned_mask, r.ref_mask);
  r.record["ncc"]["fine"] = r.score;
  return r;
}

// ---- scores CSV ---------------------------------------------------------------------------

void write_scores(std::ostream& out, const std::vector<ScoreRecord>& recs) {
  out << "probe,gallery,label,stage,score\n";
  out << std::setprecision(17);
  for (const auto& r : recs) {
    if (r.probe.find(',') != std::string::npos || r.gallery.find(',') != std::string::npos)
      throw EvalError("ids must not contain commas");
    out << r.probe << ',' << r.gallery << ',' << to_string(r.label) << ',' << to_string(r.stage) << ','
        << (r.failed ? kFailureScore : r.score) << '\n';
  }
}

std::vector<ScoreRecord> read_scores(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw EvalError("empty scores file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "probe,gallery,label,stage,score") throw EvalError("bad scores header '" + line + "'");
  std::vector<ScoreRecord> recs;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw EvalError("scores line " + std::to_string(lineno) + ": expected 5 fields");
    ScoreRecord r;
    r.probe = f[0];
    r.gallery = f[1];
    r.label = parse_label(f[2]);
    r.stage = parse_stage(f[3]);
    std::size_t used = 0;
    try {
      r.score = std::stod(f[4], &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != f[4].size() || !std::isfinite(r.score))
      throw EvalError("scores line " + std::to_string(lineno) + ": bad score '" + f[4] + "'");
    r.failed = r.score == kFailureScore;
    recs.push_back(r);
  }
  return recs;
}

// ---- protocols ------------------------------------------------------------------------------

Manifest read_protocol_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw EvalError(path + ": " + e.what());
  }
  Manifest m;
  m.root = std::filesystem::path(path).parent_path().string();
  if (!j.contains("fingers") || !j["fingers"].is_array()) throw EvalError(path + ": missing 'fingers'");
  for (const auto& f : j["fingers"]) {
    Finger g;
    g.id = f.at("id").get<std::string>();
    g.impressions = f.at("impressions").get<std::vector<std::string>>();
    if (f.contains("minutiae")) g.minutiae = f["minutiae"].get<std::vector<std::string>>();
    if (g.impressions.empty()) throw EvalError("finger '" + g.id + "' has no impressions");
    if (!g.minutiae.empty() && g.minutiae.size() != g.impressions.size())
      throw EvalError("finger '" + g.id + "': one minutiae file per impression");
    m.fingers.push_back(std::move(g));
  }
  return m;
}

ProtocolSpec ProtocolSpec::from_json(const nlohmann::json& j) {
  ProtocolSpec s;
  const std::string g = j.value("genuine", std::string("all_pairs"));
  if (g == "none") s.genuine = Genuine::None;
  else if (g == "all_pairs") s.genuine = Genuine::AllPairs;
  else if (g == "first_vs_rest") s.genuine = Genuine::FirstVsRest;
  else throw EvalError("unknown genuine rule '" + g + "'");
  const std::string i = j.value("imposter", std::string("first_impressions"));
  if (i == "none") s.imposter = Imposter::None;
  else if (i == "first_impressions") s.imposter = Imposter::FirstImpressions;
  else throw EvalError("unknown imposter rule '" + i + "'");
  s.suppress_symmetric = j.value("suppress_symmetric", true);
  return s;
}

std::vector<PairJob> make_pairs(const Manifest& m, const ProtocolSpec& spec) {
  std::vector<PairJob> jobs;
  for (std::size_t f = 0; f < m.fingers.size(); ++f) {
    const std::size_t n = m.fingers[f].impressions.size();
    switch (spec.genuine) {
      case ProtocolSpec::Genuine::None:
        break;
      case ProtocolSpec::Genuine::AllPairs:
        for (std::size_t a = 0; a < n; ++a)
          for (std::size_t b = 0; b < n; ++b)
            if (a != b && (!spec.suppress_symmetric || a < b)) jobs.push_back({f, a, f, b, Label::Genuine});
        break;
      case ProtocolSpec::Genuine::FirstVsRest:
        for (std::size_t b = 1; b < n; ++b) {
          jobs.push_back({f, b, f, 0, Label::Genuine});
          if (!spec.suppress_symmetric) jobs.push_back({f, 0, f, b, Label::Genuine});
        }
        break;
    }
  }
  if (spec.imposter == ProtocolSpec::Imposter::FirstImpressions)
    for (std::size_t a = 0; a < m.fingers.size(); ++a)
      for (std::size_t b = 0; b < m.fingers.size(); ++b)
        if (a != b && (!spec.suppress_symmetric || a < b)) jobs.push_back({a, 0, b, 0, Label::Imposter});
  return jobs;
}

std::string impression_id(const Manifest& m, std::size_t finger, std::size_t index) {
  return m.fingers.at(finger).id + "_" + std::to_string(index);
}

std::vector<ScoreRecord> run_protocol(const Manifest& m, const ProtocolSpec& spec, Stage stage,
                                      const Pipeline& pipe, int threads) {
  const std::vector<PairJob> jobs = make_pairs(m, spec);
  std::vector<ScoreRecord> recs(jobs.size());
  auto path = [&](const std::string& p) { return (std::filesystem::path(m.root) / p).string(); };
  auto run = [&](std::size_t k) {
    const PairJob& j = jobs[k];
    ScoreRecord& r = recs[k];
    r.probe = impression_id(m, j.probe_finger, j.probe_index);
    r.gallery = impression_id(m, j.gallery_finger, j.gallery_index);
    r.label = j.label;
    r.stage = stage;
    try {
      const Finger& fp = m.fingers[j.probe_finger];
      const Finger& fg = m.fingers[j.gallery_finger];
      const Image probe = io::read_pgm(path(fp.impressions[j.probe_index]));
      const Image gallery = io::read_pgm(path(fg.impressions[j.gallery_index]));
      std::optional<std::vector<coarse::Minutia>> mp, mg;
      if (!fp.minutiae.empty() && !fg.minutiae.empty()) {
        mp = coarse::read_minutiae_file(path(fp.minutiae[j.probe_index])).points;
        mg = coarse::read_minutiae_file(path(fg.minutiae[j.gallery_index])).points;
      }
      r.score = register_pair(probe, gallery, stage, pipe, std::nullopt, std::nullopt, mp, mg).score;
    } catch (const std::exception& e) {
      r.failed = true;
      r.score = kFailureScore;
      r.error = e.what();
    }
  };
  // The network keeps per-call state, so the fine stage runs on one thread.
  const int nt = stage == Stage::Fine ? 1 : std::max(1, threads);
  if (nt == 1) {
    for (std::size_t k = 0; k < jobs.size(); ++k) run(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < nt; ++t)
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < jobs.size(); k = next++) run(k);
      });
    for (auto& t : pool) t.join();
  }
  return recs;
}

// ---- rates ----------------------------------------------------------------------------------

Rates compute_rates(const std::vector<ScoreRecord>& recs, double far) {
  std::vector<double> gen, imp;
  for (const auto& r : recs) (r.label == Label::Genuine ? gen : imp).push_back(r.score);
  if (gen.empty() || imp.empty()) throw EvalError("rates need genuine and imposter scores");
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());
  std::vector<double> thr(gen);
  thr.insert(thr.end(), imp.begin(), imp.end());
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());

  const double ng = static_cast<double>(gen.size()), ni = static_cast<double>(imp.size());
  Rates out;
  for (double t : thr) {
    const double fmr = static_cast<double>(imp.end() - std::lower_bound(imp.begin(), imp.end(), t)) / ni;
    const double fnmr = static_cast<double>(std::lower_bound(gen.begin(), gen.end(), t) - gen.begin()) / ng;
    out.det.push_back({t, fmr, fnmr});
  }
  // Sweep continues to "reject everything".
  std::vector<DetPoint> sweep = out.det;
  sweep.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});

  for (std::size_t k = 0; k < sweep.size(); ++k) {
    const double d = sweep[k].fmr - sweep[k].fnmr;
    if (d > 0) continue;
    if (k == 0) {
      out.eer = sweep[0].fmr;
    } else {
      const double dp = sweep[k - 1].fmr - sweep[k - 1].fnmr;
      const double a = dp / (dp - d);
      out.eer = sweep[k - 1].fmr + a * (sweep[k].fmr - sweep[k - 1].fmr);
    }
    break;
  }
  for (const auto& p : sweep)
    if (p.fmr <= far) {
      out.tar_at_far = 1.0 - p.fnmr;
      break;
    }
  for (const auto& p : sweep)
    if (p.fmr == 0.0) {
      out.zero_fmr = p.fnmr;
      break;
    }
  return out;
}

std::vector<double> compute_cmc(const std::vector<ScoreRecord>& recs) {
  std::map<std::string, std::vector<const ScoreRecord*>> by_probe;
  for (const auto& r : recs) by_probe[r.probe].push_back(&r);
  if (by_probe.empty()) throw EvalError("cmc: no records");
  std::size_t g = 0;
  std::vector<std::size_t> ranks;
  for (const auto& [probe, list] : by_probe) {
    const ScoreRecord* mate = nullptr;
    for (const auto* r : list)
      if (r->label == Label::Genuine) {
        if (mate) throw EvalError("probe '" + probe + "' has more than one mate");
        mate = r;
      }
    if (!mate) throw EvalError("probe '" + probe + "' has no mate");
    std::size_t rank = 1;
    for (const auto* r : list)
      if (r != mate && r->score >= mate->score) ++rank;
    ranks.push_back(rank);
    g = std::max(g, list.size());
  }
  std::vector<double> cmc(g, 0.0);
  for (std::size_t k = 1; k <= g; ++k) {
    std::size_t hit = 0;
    for (auto r : ranks) hit += r <= k;
    cmc[k - 1] = static_cast<double>(hit) / ranks.size();
  }
  return cmc;
}

void write_det(std::ostream& out, const std::vector<DetPoint>& det) {
  out << "threshold,fmr,fnmr\n" << std::setprecision(17);
  for (const auto& p : det) out << p.threshold << ',' << p.fmr << ',' << p.fnmr << '\n';
}

void write_cmc(std::ostream& out, const std::vector<double>& cmc) {
  out << "rank,rate\n" << std::setprecision(17);
  for (std::size_t k = 0; k < cmc.size(); ++k) out << k + 1 << ',' << cmc[k] << '\n';
}

// ---- toy experiment -------------------------------------------------------------------------

net::TrainPair to_train_pair(const synth::TrainSample& s) {
  return {s.I, s.Iprime, s.mask, s.mask_prime, s.F, synth::consistency_region(s, 0)};
}

double ToyReport::fine_wins() const {
  if (heldout.empty()) return 0.0;
  std::size_t w = 0;
  for (const auto& h : heldout) w += h.ncc_fine > h.ncc_coarse;
  return static_cast<double>(w) / heldout.size();
}

std::function<net::TrainPair(std::size_t, int)> augmented_views(const std::vector<synth::TrainSample>& samples,
                                                                 const std::vector<net::TrainPair>& pairs,
                                                                 double prob, std::uint64_t seed) {
  if (samples.size() != pairs.size()) throw EvalError("augmented_views: samples and pairs differ in count");
  return [&samples, &pairs, prob, seed](std::size_t i, int epoch) {
    const std::uint64_t s = synth::mix_seed(synth::mix_seed(seed, 2000000 + static_cast<std::uint64_t>(epoch)), i);
    // Top 53 bits as a uniform draw in [0, 1).
    if (static_cast<double>(s >> 11) * 0x1.0p-53 >= prob) return pairs[i];
    return to_train_pair(synth::random_augment(samples[i], s));
  };
}

ToyReport run_toy(const ToyOptions& opt, net::PdrNet* net_out) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<synth::TrainSample> samples;
  std::vector<net::TrainPair> train;
  for (int i = 0; i < opt.train_pairs; ++i) {
    samples.push_back(synth::generate_sample(opt.size, opt.magnitude, opt.grid, synth::mix_seed(opt.seed, i)));
    train.push_back(to_train_pair(samples.back()));
  }

  net::PdrNet model(opt.config, opt.seed);
  net::TrainOptions to;
  to.epochs = opt.epochs;
  to.seed = opt.seed;
  to.on_epoch = opt.on_epoch;
  if (opt.augment_prob > 0.0) to.view = augmented_views(samples, train, opt.augment_prob, opt.seed);
  ToyReport rep;
  rep.log = net::train_toy(model, train, to).log;
  rep.final_train = net::evaluate(model, train);

  Pipeline pipe;
  pipe.net = &model;
  for (int i = 0; i < opt.heldout_pairs; ++i) {
    // Held-out streams start far past the training ones.
    const synth::TrainSample s =
        synth::generate_sample(opt.size, opt.magnitude, opt.grid, synth::mix_seed(opt.seed, 1000000 + i));
    const Registration r = register_pair(s.I, s.Iprime, Stage::Fine, pipe, s.mask, s.mask_prime);
    HeldoutPair h;
    h.ncc_coarse = r.record["ncc"]["coarse"].get<double>();
    h.ncc_fine = r.score;
    h.coarse_path = r.record["coarse"]["path"].get<std::string>();
    const net::TrainPair tp = to_train_pair(s);
    const net::EvalSummary e = net::evaluate(model, {tp});
    h.epe = e.epe;
    h.zero_epe = e.zero_epe;
    rep.heldout.push_back(h);
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (net_out) *net_out = std::move(model);
  return rep;
}

}  // namespace pdr::eval
