#include "pdr/pdrnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

#include "pdr/ridge.hpp"
#include "pdr/tps.hpp"

namespace pdr::net {

using nn::BnMode;
using nn::Shape;
using nn::Tensor;

// ---- config ----------------------------------------------------------------------

void NetConfig::validate() const {
  auto fail = [](const std::string& m) { throw NetError("invalid config: " + m); };
  if (base_channels < 1) fail("base_channels must be >= 1");
  if (interaction_stages < 1) fail("interaction_stages must be >= 1");
  if (intervals < 2) fail("intervals must be >= 2");
  if (!(disp_range > 0)) fail("disp_range must be > 0");
  if (aspp_dilations.empty()) fail("aspp_dilations must not be empty");
  for (int d : aspp_dilations)
    if (d < 1) fail("aspp dilation must be >= 1");
  if (!(sigma_label > 0)) fail("sigma_label must be > 0");
  if (!(focal_alpha > 0) || focal_gamma < 0) fail("focal parameters out of range");
  if (lambda_smooth < 0) fail("lambda_smooth must be >= 0");
  if (lr < 0 || momentum < 0 || momentum >= 1) fail("optimizer parameters out of range");
  if (batch < 1) fail("batch must be >= 1");
  parse_focal_form(focal_form);
}

nlohmann::json NetConfig::to_json() const {
  return {{"base_channels", base_channels}, {"interaction_stages", interaction_stages},
          {"intervals", intervals},         {"disp_range", disp_range},
          {"aspp_dilations", aspp_dilations}, {"sigma_label", sigma_label},
          {"focal_alpha", focal_alpha},     {"focal_gamma", focal_gamma},
          {"focal_form", focal_form},
          {"lambda_smooth", lambda_smooth}, {"lr", lr},
          {"momentum", momentum},           {"batch", batch}};
}

NetConfig NetConfig::tiny() {
  NetConfig c;
  c.base_channels = 8;
  c.interaction_stages = 2;
  return c;
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw NetError("config must be a JSON object");
  NetConfig c;
  const auto known = c.to_json();
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw NetError("unknown config key: " + k);
  try {
    c.base_channels = j.value("base_channels", c.base_channels);
    c.interaction_stages = j.value("interaction_stages", c.interaction_stages);
    c.intervals = j.value("intervals", c.intervals);
    c.disp_range = j.value("disp_range", c.disp_range);
    c.aspp_dilations = j.value("aspp_dilations", c.aspp_dilations);
    c.sigma_label = j.value("sigma_label", c.sigma_label);
    c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
    c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
    c.focal_form = j.value("focal_form", c.focal_form);
    c.lambda_smooth = j.value("lambda_smooth", c.lambda_smooth);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.batch = j.value("batch", c.batch);
  } catch (const nlohmann::json::exception& e) {
    throw NetError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

NetConfig NetConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw NetError("cannot open config " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw NetError("config " + path + ": " + e.what());
  }
  // A config file may also carry other sections; the network reads "net" if present.
  return from_json(j.contains("net") ? j["net"] : j);
}

ClassGrid ClassGrid::make(int intervals, double range) {
  if (intervals < 2 || !(range > 0)) throw NetError("class grid needs T >= 2 and range > 0");
  ClassGrid g;
  const double step = 2.0 * range / (intervals - 1);
  for (int t = 0; t < intervals; ++t) g.centers.push_back(-range + t * step);
  // Pin symmetry exactly.
  for (int t = 0; t < intervals / 2; ++t) g.centers[intervals - 1 - t] = -g.centers[t];
  if (intervals % 2) g.centers[intervals / 2] = 0.0;
  return g;
}

// ---- decoding and labels -------------------------------------------------------------

DisplacementField decode_cells(const Tensor& vol, int item, const ClassGrid& grid) {
  const Shape s = vol.shape();
  const int T = grid.size();
  if (s.c != 2 * T) throw NetError("volume has " + std::to_string(s.c) + " channels, expected 2T");
  if (item < 0 || item >= s.n) throw NetError("volume item out of range");
  DisplacementField out(s.w, s.h, 1.0 / kCellSize);
  for (int axis = 0; axis < 2; ++axis) {
    Grid<double>& dst = axis == 0 ? out.dx : out.dy;
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        auto p = [&](int t) { return vol.at(item, axis * T + t, y, x); };
        double mass = 0.0;
        for (int t = 0; t < T; ++t) mass += p(t);
        if (std::fabs(mass - 1.0) > 1e-3) throw NetError("denormalized probability volume");
        // Mirrored classes are paired first so symmetric mass cancels exactly.
        double moment = 0.0;
        for (int t = 0; t < T / 2; ++t)
          moment += p(t) * grid.centers[t] + p(T - 1 - t) * grid.centers[T - 1 - t];
        if (T % 2) moment += p(T / 2) * grid.centers[T / 2];
        dst(x, y) = moment / mass;
      }
  }
  return out;
}

Mask cell_mask(const Mask& full, int cell) {
  const int cw = full.width() / cell;
  const int ch = full.height() / cell;
  Mask out(cw, ch, 0);
  for (int cy = 0; cy < ch; ++cy)
    for (int cx = 0; cx < cw; ++cx) {
      int n = 0;
      for (int y = cy * cell; y < (cy + 1) * cell; ++y)
        for (int x = cx * cell; x < (cx + 1) * cell; ++x) n += full(x, y) ? 1 : 0;
      out(cx, cy) = 2 * n >= cell * cell ? 1 : 0;
    }
  return out;
}

DisplacementField decode_displacement(const Tensor& vol, int item, const ClassGrid& grid,
                                      const Mask& overlap) {
  DisplacementField cells = decode_cells(vol, item, grid);
  const int w = cells.width() * kCellSize;
  const int h = cells.height() * kCellSize;
  if (overlap.width() != w || overlap.height() != h)
    throw NetError("overlap mask does not match the volume resolution");
  const Mask cm = cell_mask(overlap);
  const std::size_t covered = count(cm);
  if (covered > 0 && covered < cm.size()) {
    tps::ExtrapolateOptions opt;
    opt.stride = 1;
    cells = tps::tps_extrapolate_field(cells, cm, opt);
    const double r = grid.centers.back();
    for (auto* g : {&cells.dx, &cells.dy})
      for (auto& v : g->data()) v = std::clamp(v, -r, r);
  }
  return resize_bilinear(cells, w, h);
}

Tensor make_labels(const DisplacementField& cells, const ClassGrid& grid, double sigma,
                   std::size_t* clamped) {
  const int T = grid.size();
  const double lo = grid.centers.front(), hi = grid.centers.back();
  Tensor out = Tensor::zeros({1, 2 * T, cells.height(), cells.width()});
  std::vector<double> w(T);
  for (int axis = 0; axis < 2; ++axis) {
    const Grid<double>& src = axis == 0 ? cells.dx : cells.dy;
    for (int y = 0; y < cells.height(); ++y)
      for (int x = 0; x < cells.width(); ++x) {
        double z = src(x, y);
        if (z < lo || z > hi) {
          z = std::clamp(z, lo, hi);
          if (clamped) ++*clamped;
        }
        double total = 0.0;
        for (int t = 0; t < T; ++t) {
          const double d = z - grid.centers[t];
          w[t] = std::exp(-d * d / (2.0 * sigma * sigma));
          total += w[t];
        }
        for (int t = 0; t < T; ++t) out.at(0, axis * T + t, y, x) = w[t] / total;
      }
  }
  return out;
}

// ---- losses --------------------------------------------------------------------------

namespace {

double mask_count(const Tensor& pred, const Tensor& mask) {
  const Shape s = pred.shape();
  if (!(mask.shape() == Shape{s.n, 1, s.h, s.w})) throw NetError("loss mask shape mismatch");
  double m = 0.0;
  for (double v : mask.data()) m += v != 0.0 ? 1.0 : 0.0;
  if (m == 0.0) throw NetError("empty loss mask");
  return m;
}

}  // namespace

FocalForm parse_focal_form(const std::string& s) {
  if (s == "binary") return FocalForm::Binary;
  if (s == "multiclass") return FocalForm::Multiclass;
  throw NetError("focal_form must be binary or multiclass, got " + s);
}

Tensor focal_loss(const Tensor& pred, const Tensor& labels, const Tensor& mask, double alpha,
                  double gamma, FocalForm form) {
  if (!(pred.shape() == labels.shape())) throw NetError("focal_loss: label shape mismatch");
  const double m = mask_count(pred, mask);
  const Shape s = pred.shape();
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  const bool binary = form == FocalForm::Binary;
  // Per-element term and its derivative wrt p. Binary: f(q) with q linear in p.
  // Multiclass: y f(p). f(q) = (1-q)^g log(max(q, floor)).
  auto f = [gamma](double q) { return std::pow(1.0 - q, gamma) * std::log(std::max(q, kFocalFloor)); };
  auto df = [gamma](double q) {
    const double one_q = 1.0 - q;
    double d = q >= kFocalFloor ? std::pow(one_q, gamma) / q : 0.0;
    if (gamma != 0.0 && one_q > 0.0) d -= gamma * std::pow(one_q, gamma - 1.0) * std::log(std::max(q, kFocalFloor));
    return d;
  };
  double total = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      if (mask.data()[n * hw + p] == 0.0) continue;
      for (int c = 0; c < s.c; ++c) {
        const std::size_t i = (static_cast<std::size_t>(n) * s.c + c) * hw + p;
        const double y = labels.data()[i], pr = pred.data()[i];
        if (binary) {
          const double q = y * pr + (1.0 - y) * (1.0 - pr);
          nn::trace_branch(q >= kFocalFloor);
          total += alpha * f(q);
        } else if (y != 0.0) {
          nn::trace_branch(pr >= kFocalFloor);
          total += alpha * y * f(pr);
        }
      }
    }
  return nn::make_op({1, 1, 1, 1}, {-total / m}, {pred}, [labels, mask, m, alpha, s, hw, binary, df](nn::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& pv = self.parents[0]->value;
    const double k = self.grad[0] * (-alpha / m);
    for (int n = 0; n < s.n; ++n)
      for (std::size_t p = 0; p < hw; ++p) {
        if (mask.data()[n * hw + p] == 0.0) continue;
        for (int c = 0; c < s.c; ++c) {
          const std::size_t i = (static_cast<std::size_t>(n) * s.c + c) * hw + p;
          const double y = labels.data()[i];
          if (binary) {
            g[i] += k * df(y * pv[i] + (1.0 - y) * (1.0 - pv[i])) * (2.0 * y - 1.0);
          } else if (y != 0.0) {
            g[i] += k * y * df(pv[i]);
          }
        }
      }
  });
}

Tensor smooth_loss(const Tensor& pred, const Tensor& mask) {
  const Shape s = pred.shape();
  if (s.h < 3 || s.w < 3) throw NetError("smooth_loss needs at least 3x3 cells");
  const double m = mask_count(pred, mask);
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  auto at = [s](int x, int y) {
    x = std::clamp(x, 0, s.w - 1);
    y = std::clamp(y, 0, s.h - 1);
    return static_cast<std::size_t>(y) * s.w + x;
  };
  double total = 0.0;
  std::vector<double> sign(pred.size(), 0.0);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const double* p = pred.data().data() + (static_cast<std::size_t>(n) * s.c + c) * hw;
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          if (mask.data()[n * hw + at(x, y)] == 0.0) continue;
          const double lap = p[at(x - 1, y)] + p[at(x + 1, y)] + p[at(x, y - 1)] + p[at(x, y + 1)] -
                             4.0 * p[at(x, y)];
          total += std::fabs(lap);
          nn::trace_branch(lap > 0);
          sign[(static_cast<std::size_t>(n) * s.c + c) * hw + at(x, y)] = (lap > 0) - (lap < 0);
        }
    }
  return nn::make_op({1, 1, 1, 1}, {total / m}, {pred}, [sign = std::move(sign), s, hw, m, at](nn::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double k = self.grad[0] / m;
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      const std::size_t base = static_cast<std::size_t>(nc) * hw;
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const double sg = sign[base + at(x, y)];
          if (sg == 0.0) continue;
          g[base + at(x - 1, y)] += k * sg;
          g[base + at(x + 1, y)] += k * sg;
          g[base + at(x, y - 1)] += k * sg;
          g[base + at(x, y + 1)] += k * sg;
          g[base + at(x, y)] -= 4.0 * k * sg;
        }
    }
  });
}

Tensor total_loss(const Tensor& pred, const Tensor& labels, const Tensor& mask, const NetConfig& cfg) {
  const Tensor cla =
      focal_loss(pred, labels, mask, cfg.focal_alpha, cfg.focal_gamma, parse_focal_form(cfg.focal_form));
  return nn::add(cla, nn::scale(smooth_loss(pred, mask), cfg.lambda_smooth));
}

// ---- network ---------------------------------------------------------------------------

PdrNet::PdrNet(const NetConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), grid_(ClassGrid::make(cfg.intervals, cfg.disp_range)), seed_(seed) {
  cfg_.validate();
  const int c = cfg_.base_channels;
  conv("corr.e1", 1, c, 3, 2);
  conv("corr.e2", c, 2 * c, 3, 2);
  conv("corr.e3", 2 * c, 4 * c, 3, 2);
  conv("tex.e1", 2, c, 3, 2);
  conv("tex.e2", c, 2 * c, 3, 2);
  conv("tex.e3", 2 * c, 4 * c, 3, 2);
  conv("tex.e4", 4 * c, 8 * c, 3, 2);
  for (int s = 0; s < cfg_.interaction_stages; ++s) {
    const std::string p = "stage" + std::to_string(s);
    conv(p + ".corr.a", 4 * c, 4 * c, 3);
    conv(p + ".corr.b", 4 * c, 4 * c, 3);
    conv(p + ".tex.a", 8 * c, 8 * c, 3);
    conv(p + ".tex.b", 8 * c, 8 * c, 3);
    conv(p + ".t2c", 8 * c, 4 * c, 1);
    conv(p + ".c2t", 4 * c, 8 * c, 1);
  }
  conv("head.reduce", 12 * c, 4 * c, 1);
  conv("head.mid", 4 * c, 4 * c, 3);
  conv("head.expand", 4 * c, 8 * c, 1);
  conv("head.proj", 12 * c, 8 * c, 1);
  for (int d : cfg_.aspp_dilations) conv("aspp.d" + std::to_string(d), 8 * c, 2 * c, 3, 1, d);
  conv("aspp.pool", 8 * c, 2 * c, 1, 1, 1, false);
  const int branches = static_cast<int>(cfg_.aspp_dilations.size()) + 1;
  conv("out", branches * 2 * c, 2 * cfg_.intervals, 1, 1, 1, false);

  // He-normal kernels; the output layer starts near zero so the first
  // predictions are close to uniform distributions.
  std::mt19937_64 rng(seed);
  for (const auto& l : convs_) {
    const double fan_in = static_cast<double>(l.cin) * l.k * l.k;
    const double std = l.name == "out" ? 0.1 / std::sqrt(fan_in) : std::sqrt(2.0 / fan_in);
    std::normal_distribution<double> nd(0.0, std);
    for (auto& v : params_.get(l.name + ".k").data()) v = nd(rng);
  }
}

PdrNet::Conv& PdrNet::conv(const std::string& name, int cin, int cout, int k, int stride, int dilation,
                           bool bn) {
  params_.add(name + ".k", {cout, cin, k, k});
  if (bn) {
    params_.add(name + ".gamma", {1, cout, 1, 1}).data().assign(cout, 1.0);
    params_.add(name + ".beta", {1, cout, 1, 1});
    params_.add(name + ".rm", {1, cout, 1, 1}, false);
    params_.add(name + ".rv", {1, cout, 1, 1}, false).data().assign(cout, 1.0);
  } else {
    params_.add(name + ".b", {1, cout, 1, 1});
  }
  convs_.push_back({name, cin, cout, k, stride, dilation, bn});
  return convs_.back();
}

std::size_t PdrNet::conv_weight_count() const {
  std::size_t n = 0;
  for (const auto& l : convs_) n += params_.get(l.name + ".k").size();
  return n;
}

Tensor PdrNet::apply(const Conv& c, const Tensor& x, BnMode mode) {
  const nn::ConvSpec spec{c.stride, c.dilation, c.dilation * (c.k / 2)};
  if (!c.bn) return nn::conv2d(x, params_.get(c.name + ".k"), params_.get(c.name + ".b"), spec);
  const Tensor y = nn::conv2d(x, params_.get(c.name + ".k"), Tensor(), spec);
  return nn::batchnorm(y, params_.get(c.name + ".gamma"), params_.get(c.name + ".beta"),
                       params_.get(c.name + ".rm"), params_.get(c.name + ".rv"), mode);
}

Tensor PdrNet::residual(const std::string& prefix, const Tensor& x, BnMode mode) {
  auto find = [this](const std::string& n) -> const Conv& {
    for (const auto& l : convs_)
      if (l.name == n) return l;
    throw NetError("missing layer " + n);
  };
  const Tensor a = nn::relu(apply(find(prefix + ".a"), x, mode));
  return nn::relu(nn::add(x, apply(find(prefix + ".b"), a, mode)));
}

Tensor PdrNet::forward(const Tensor& texture, const Tensor& psi, BnMode mode, Features* features) {
  const Shape ts = texture.shape();
  if (ts.c != 2 || !(psi.shape() == Shape{ts.n, 1, ts.h, ts.w}))
    throw NetError("forward expects texture (N,2,H,W) and psi (N,1,H,W)");
  if (ts.h % 16 || ts.w % 16 || ts.h == 0 || ts.w == 0) {
    auto up = [](int v) { return (v + 15) / 16 * 16; };
    throw NetError("input " + std::to_string(ts.w) + "x" + std::to_string(ts.h) +
                   " must be a multiple of 16; pad to " + std::to_string(up(ts.w)) + "x" +
                   std::to_string(up(ts.h)));
  }
  std::map<std::string, const Conv*> by_name;
  for (const auto& l : convs_) by_name[l.name] = &l;
  auto L = [&](const std::string& n) -> const Conv& { return *by_name.at(n); };
  auto cbr = [&](const std::string& n, const Tensor& x) { return nn::relu(apply(L(n), x, mode)); };

  Tensor corr = cbr("corr.e3", cbr("corr.e2", cbr("corr.e1", psi)));
  Tensor tex = cbr("tex.e4", cbr("tex.e3", cbr("tex.e2", cbr("tex.e1", texture))));
  if (features) {
    features->correlation = corr;
    features->texture = tex;
  }
  const int h8 = corr.shape().h, w8 = corr.shape().w;
  const int h16 = tex.shape().h, w16 = tex.shape().w;

  for (int s = 0; s < cfg_.interaction_stages; ++s) {
    const std::string p = "stage" + std::to_string(s);
    const Tensor c1 = residual(p + ".corr", corr, mode);
    const Tensor t1 = residual(p + ".tex", tex, mode);
    corr = nn::add(c1, nn::resize_bilinear(apply(L(p + ".t2c"), t1, mode), h8, w8));
    tex = nn::add(t1, apply(L(p + ".c2t"), nn::resize_bilinear(c1, h16, w16), mode));
  }

  const Tensor fused = nn::concat_channels({corr, nn::resize_bilinear(tex, h8, w8)});
  if (features) features->fused = fused;
  const Tensor b = apply(L("head.expand"), cbr("head.mid", cbr("head.reduce", fused)), mode);
  const Tensor head = nn::relu(nn::add(b, apply(L("head.proj"), fused, mode)));

  std::vector<Tensor> branches;
  for (int d : cfg_.aspp_dilations) branches.push_back(cbr("aspp.d" + std::to_string(d), head));
  const Tensor pooled = nn::relu(apply(L("aspp.pool"), nn::avgpool_global(head), mode));
  branches.push_back(nn::resize_bilinear(pooled, h8, w8));
  const Tensor logits = apply(L("out"), nn::concat_channels(branches), mode);
  return nn::softmax_channels(logits, cfg_.intervals);
}

// ---- inputs, inference, training ---------------------------------------------------------

NetInputs prepare_inputs(const Image& input, const Image& ref, const Mask& input_mask,
                         const Mask& ref_mask) {
  const ridge::PreprocessedPair pp = ridge::preprocess_pair(input, ref, input_mask, ref_mask);
  NetInputs in;
  in.enh_input = pp.enh_input;
  in.enh_ref = pp.enh_ref;
  in.psi = pp.psi;
  in.common = mask_and(pp.mask_input, pp.mask_ref);
  return in;
}

namespace {

void stack_inputs(const std::vector<const NetInputs*>& items, Tensor& texture, Tensor& psi) {
  const int n = static_cast<int>(items.size());
  const int w = items[0]->psi.width(), h = items[0]->psi.height();
  texture = Tensor::zeros({n, 2, h, w});
  psi = Tensor::zeros({n, 1, h, w});
  for (int i = 0; i < n; ++i) {
    const NetInputs& in = *items[i];
    if (in.psi.width() != w || in.psi.height() != h) throw NetError("batch items differ in size");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        texture.at(i, 0, y, x) = in.enh_input(x, y);
        texture.at(i, 1, y, x) = in.enh_ref(x, y);
        psi.at(i, 0, y, x) = in.psi(x, y) / std::numbers::pi;
      }
  }
}

struct Prepared {
  NetInputs inputs;
  Tensor labels;  // (1, 2T, h, w)
  Mask cells;     // loss mask at 1/8
};

}  // namespace

Prediction predict(PdrNet& net, const NetInputs& in, const Mask& overlap) {
  Tensor texture, psi;
  stack_inputs({&in}, texture, psi);
  Prediction out;
  out.volume = net.forward(texture, psi, BnMode::Eval, &out.features);
  out.field = decode_displacement(out.volume, 0, net.grid(), overlap);
  return out;
}

double endpoint_error(const DisplacementField& a, const DisplacementField& b, const Mask& mask) {
  if (a.width() != b.width() || a.height() != b.height() || a.width() != mask.width() ||
      a.height() != mask.height())
    throw NetError("endpoint_error: size mismatch");
  double s = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask(x, y)) continue;
      s += std::hypot(a.dx(x, y) - b.dx(x, y), a.dy(x, y) - b.dy(x, y));
      ++n;
    }
  if (n == 0) throw NetError("endpoint_error: empty mask");
  return s / static_cast<double>(n);
}

TrainResult train_toy(PdrNet& net, const std::vector<TrainPair>& data, const TrainOptions& opts) {
  if (data.empty()) throw NetError("empty training set");
  const NetConfig& cfg = net.config();
  auto prepare = [&](const TrainPair& d) {
    Prepared p;
    p.inputs = prepare_inputs(d.input, d.ref, d.input_mask, d.ref_mask);
    p.labels = make_labels(downsample_mean(d.gt, kCellSize), net.grid(), cfg.sigma_label);
    p.cells = cell_mask(d.overlap);
    return p;
  };
  std::vector<Prepared> prep;
  std::vector<TrainPair> views;  // this epoch's pairs when opts.view is set
  if (!opts.view) {
    prep.reserve(data.size());
    for (const auto& d : data) prep.push_back(prepare(d));
  }

  nn::Sgd opt(cfg.lr, cfg.momentum);
  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  TrainResult result;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    if (opts.view) {
      views.clear();
      prep.clear();
      for (std::size_t i = 0; i < data.size(); ++i) {
        views.push_back(opts.view(i, epoch));
        prep.push_back(prepare(views.back()));
      }
    }
    const std::vector<TrainPair>& cur = opts.view ? views : data;
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, epe_sum = 0.0, zero_sum = 0.0;
    std::size_t batches = 0, scored = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      std::vector<const NetInputs*> items;
      for (std::size_t k = b0; k < b1; ++k) items.push_back(&prep[order[k]].inputs);
      Tensor texture, psi;
      stack_inputs(items, texture, psi);
      const int n = static_cast<int>(items.size());
      const Shape ls = prep[order[b0]].labels.shape();
      Tensor labels = Tensor::zeros({n, ls.c, ls.h, ls.w});
      Tensor mask = Tensor::zeros({n, 1, ls.h, ls.w});
      const std::size_t lsz = ls.size(), msz = static_cast<std::size_t>(ls.h) * ls.w;
      for (int i = 0; i < n; ++i) {
        const Prepared& p = prep[order[b0 + i]];
        std::copy(p.labels.data().begin(), p.labels.data().end(), labels.data().begin() + i * lsz);
        for (std::size_t k = 0; k < msz; ++k) mask.data()[i * msz + k] = p.cells.data()[k] ? 1.0 : 0.0;
      }
      if (std::all_of(mask.data().begin(), mask.data().end(), [](double v) { return v == 0.0; })) continue;

      net.params().zero_grad();
      const Tensor vol = net.forward(texture, psi, BnMode::Train);
      const Tensor loss = total_loss(vol, labels, mask, cfg);
      nn::backward(loss);
      opt.step(net.params());
      loss_sum += loss.item();
      ++batches;

      for (int i = 0; i < n; ++i) {
        const TrainPair& d = cur[order[b0 + i]];
        if (count(d.overlap) == 0) continue;
        const DisplacementField f =
            resize_bilinear(decode_cells(vol, i, net.grid()), d.gt.width(), d.gt.height());
        epe_sum += endpoint_error(f, d.gt, d.overlap);
        zero_sum += endpoint_error(DisplacementField(d.gt.width(), d.gt.height()), d.gt, d.overlap);
        ++scored;
      }
    }
    EpochLog log;
    log.epoch = epoch + 1;
    log.loss = batches ? loss_sum / batches : 0.0;
    log.epe = scored ? epe_sum / scored : 0.0;
    log.zero_epe = scored ? zero_sum / scored : 0.0;
    result.log.push_back(log);
    if (opts.on_epoch) opts.on_epoch(log);
  }
  return result;
}

EvalSummary evaluate(PdrNet& net, const std::vector<TrainPair>& data) {
  EvalSummary s;
  std::size_t n = 0;
  for (const auto& d : data) {
    if (count(d.overlap) == 0) continue;
    const NetInputs in = prepare_inputs(d.input, d.ref, d.input_mask, d.ref_mask);
    const Prediction p = predict(net, in, d.overlap);
    s.epe += endpoint_error(p.field, d.gt, d.overlap);
    s.zero_epe += endpoint_error(DisplacementField(d.gt.width(), d.gt.height()), d.gt, d.overlap);
    ++n;
  }
  if (n == 0) throw NetError("evaluate: no pair has overlap");
  s.epe /= static_cast<double>(n);
  s.zero_epe /= static_cast<double>(n);
  return s;
}

}  // namespace pdr::net
