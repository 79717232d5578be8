#include "pdr/coarse.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <thread>

namespace pdr::coarse {

namespace {

constexpr double kPi = std::numbers::pi;

double wrap2pi(double a) {
  a = std::fmod(a, 2 * kPi);
  if (a < 0) a += 2 * kPi;
  return a >= 2 * kPi ? 0.0 : a;
}

// (-pi, pi]
double wrap_pm(double a) { return ridge::wrap_phase(a); }

// Neighbour offsets in circular order starting east, y down.
constexpr std::array<int, 8> kNx = {1, 1, 0, -1, -1, -1, 0, 1};
constexpr std::array<int, 8> kNy = {0, 1, 1, 1, 0, -1, -1, -1};

using Bin = Grid<std::uint8_t>;

bool on(const Bin& b, int x, int y) { return b.inside(x, y) && b(x, y); }

int crossing_number(const Bin& s, int x, int y) {
  int t = 0;
  for (int k = 0; k < 8; ++k) {
    const int a = on(s, x + kNx[k], y + kNy[k]);
    const int b = on(s, x + kNx[(k + 1) % 8], y + kNy[(k + 1) % 8]);
    t += a != b;
  }
  return t / 2;
}

// One start pixel per branch leaving (x, y): runs of consecutive set neighbours,
// axial member preferred.
std::vector<std::pair<int, int>> branch_starts(const Bin& s, int x, int y) {
  std::vector<std::pair<int, int>> out;
  int first_off = -1;
  for (int k = 0; k < 8; ++k)
    if (!on(s, x + kNx[k], y + kNy[k])) {
      first_off = k;
      break;
    }
  if (first_off < 0) return out;
  int best = -1;
  for (int i = 1; i <= 8; ++i) {
    const int k = (first_off + i) % 8;
    const bool set = on(s, x + kNx[k], y + kNy[k]);
    if (set) {
      if (best < 0 || (best % 2 == 1 && k % 2 == 0)) best = k;
    } else if (best >= 0) {
      out.emplace_back(x + kNx[best], y + kNy[best]);
      best = -1;
    }
  }
  return out;
}

struct Trace {
  int x = 0, y = 0;     // last pixel reached
  int length = 0;
  bool hit_minutia = false;  // stopped on another ending/bifurcation
};

// Walk the skeleton from `start` away from (ox, oy) for at most `max_len` pixels.
Trace walk(const Bin& s, int ox, int oy, int sx, int sy, int max_len, const Grid<int>& cn) {
  // The origin's other neighbours belong to sibling branches.
  std::vector<std::pair<int, int>> seen = {{ox, oy}};
  for (int k = 0; k < 8; ++k) seen.emplace_back(ox + kNx[k], oy + kNy[k]);
  auto visited = [&](int x, int y) {
    return std::find(seen.begin(), seen.end(), std::make_pair(x, y)) != seen.end();
  };
  Trace t{sx, sy, 1, false};
  while (t.length < max_len) {
    const int c = cn(t.x, t.y);
    if (c == 1 || c >= 3) {
      t.hit_minutia = true;
      return t;
    }
    int nx = -1, ny = -1;
    for (int pass = 0; pass < 2 && nx < 0; ++pass)
      for (int k = pass; k < 8; k += 2) {
        const int x = t.x + kNx[k], y = t.y + kNy[k];
        if (on(s, x, y) && !visited(x, y)) {
          nx = x;
          ny = y;
          break;
        }
      }
    if (nx < 0) return t;
    seen.emplace_back(nx, ny);
    t.x = nx;
    t.y = ny;
    ++t.length;
  }
  return t;
}

}  // namespace

std::string to_string(MinutiaKind k) {
  switch (k) {
    case MinutiaKind::Ending:
      return "ending";
    case MinutiaKind::Bifurcation:
      return "bifurcation";
    case MinutiaKind::Unknown:
      break;
  }
  return "unknown";
}

MinutiaKind parse_minutia_kind(const std::string& s) {
  if (s == "ending") return MinutiaKind::Ending;
  if (s == "bifurcation") return MinutiaKind::Bifurcation;
  if (s == "unknown") return MinutiaKind::Unknown;
  throw CoarseError("unknown minutia kind '" + s + "'");
}

MinutiaeFile read_minutiae(std::istream& in) {
  std::string tag;
  long n = -1;
  MinutiaeFile f;
  if (!(in >> tag >> n >> f.width >> f.height) || tag != "MNT" || n < 0 || f.width <= 0 ||
      f.height <= 0)
    throw CoarseError("bad minutiae header");
  for (long i = 0; i < n; ++i) {
    Minutia m;
    double deg = 0;
    std::string kind;
    if (!(in >> m.x >> m.y >> deg >> kind))
      throw CoarseError("minutiae file truncated at entry " + std::to_string(i));
    if (m.x < 0 || m.y < 0 || m.x > f.width - 1 || m.y > f.height - 1)
      throw CoarseError("minutia " + std::to_string(i) + " outside the image");
    m.direction = wrap2pi(deg * kPi / 180.0);
    m.kind = parse_minutia_kind(kind);
    f.points.push_back(m);
  }
  return f;
}

void write_minutiae(std::ostream& out, const MinutiaeFile& f) {
  out << "MNT " << f.points.size() << ' ' << f.width << ' ' << f.height << '\n';
  out << std::setprecision(10);
  for (const auto& m : f.points)
    out << m.x << ' ' << m.y << ' ' << m.direction * 180.0 / kPi << ' ' << to_string(m.kind) << '\n';
}

MinutiaeFile read_minutiae_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CoarseError("cannot open " + path);
  return read_minutiae(in);
}

void write_minutiae_file(const std::string& path, const MinutiaeFile& f) {
  std::ofstream out(path);
  if (!out) throw CoarseError("cannot write " + path);
  write_minutiae(out, f);
}

// ---- extraction -----------------------------------------------------------------------

Bin thin(const Bin& bin) {
  Bin s = bin;
  for (auto& v : s.data()) v = v ? 1 : 0;
  const int w = s.width(), h = s.height();
  std::vector<std::pair<int, int>> del;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int step = 0; step < 2; ++step) {
      del.clear();
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (!s(x, y)) continue;
          // P2..P9 clockwise from north.
          const int p2 = on(s, x, y - 1), p3 = on(s, x + 1, y - 1), p4 = on(s, x + 1, y),
                    p5 = on(s, x + 1, y + 1), p6 = on(s, x, y + 1), p7 = on(s, x - 1, y + 1),
                    p8 = on(s, x - 1, y), p9 = on(s, x - 1, y - 1);
          const int b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
          if (b < 2 || b > 6) continue;
          const std::array<int, 9> seq = {p2, p3, p4, p5, p6, p7, p8, p9, p2};
          int a = 0;
          for (int k = 0; k < 8; ++k) a += seq[k] == 0 && seq[k + 1] == 1;
          if (a != 1) continue;
          if (step == 0 ? (p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0)
                        : (p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0))
            del.emplace_back(x, y);
        }
      for (auto [x, y] : del) s(x, y) = 0;
      changed = changed || !del.empty();
    }
  }
  return s;
}

std::vector<Minutia> extract_minutiae(const Image& enh, const Mask& mask, double period) {
  if (!enh.same_shape(mask)) throw CoarseError("extract_minutiae: image and mask differ in size");
  if (!(period > 0)) throw CoarseError("extract_minutiae: period must be positive");
  const int w = enh.width(), h = enh.height();
  Bin bin(w, h);
  std::size_t fg = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bin(x, y) = mask(x, y) && enh(x, y) < 0;
      fg += mask(x, y) != 0;
    }
  if (fg == 0) return {};
  const Bin s = thin(bin);

  // Interior: a (2r+1)^2 square around the pixel lies fully inside mask and frame.
  const int r = static_cast<int>(std::ceil(period));
  Grid<int> integral(w + 1, h + 1, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      integral(x + 1, y + 1) = (mask(x, y) != 0) + integral(x, y + 1) + integral(x + 1, y) - integral(x, y);
  auto interior = [&](int x, int y) {
    if (x - r < 0 || y - r < 0 || x + r >= w || y + r >= h) return false;
    const int x0 = x - r, y0 = y - r, x1 = x + r + 1, y1 = y + r + 1;
    const int n = integral(x1, y1) - integral(x0, y1) - integral(x1, y0) + integral(x0, y0);
    return n == (2 * r + 1) * (2 * r + 1);
  };

  Grid<int> cn(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (s(x, y)) cn(x, y) = crossing_number(s, x, y);

  struct Cand {
    int x, y;
    MinutiaKind kind;
    double dir;
    bool keep = true;
  };
  std::vector<Cand> cands;
  const int len = std::max(2, static_cast<int>(std::lround(period)));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!s(x, y)) continue;
      const int c = cn(x, y);
      if (c == 1) {
        const auto starts = branch_starts(s, x, y);
        if (starts.empty()) continue;
        const Trace t = walk(s, x, y, starts[0].first, starts[0].second, len, cn);
        cands.push_back({x, y, MinutiaKind::Ending, std::atan2(y - t.y, x - t.x)});
      } else if (c == 3) {
        const auto starts = branch_starts(s, x, y);
        if (starts.size() != 3) continue;
        std::array<double, 3> ang{};
        for (int i = 0; i < 3; ++i) {
          const Trace t = walk(s, x, y, starts[i].first, starts[i].second, len, cn);
          ang[i] = std::atan2(t.y - y, t.x - x);
        }
        // The two closest branches form the fork; direction is their bisector.
        int stem = 0;
        double narrowest = 4 * kPi;
        for (int i = 0; i < 3; ++i) {
          const double gap = std::fabs(wrap_pm(ang[(i + 1) % 3] - ang[(i + 2) % 3]));
          if (gap < narrowest) {
            narrowest = gap;
            stem = i;
          }
        }
        const double a1 = ang[(stem + 1) % 3], a2 = ang[(stem + 2) % 3];
        cands.push_back({x, y, MinutiaKind::Bifurcation, a1 + wrap_pm(a2 - a1) / 2});
      }
    }

  // Spurs and short fragments: an ending whose ridge meets another minutia
  // within one period takes that minutia with it.
  auto find = [&](int x, int y) -> Cand* {
    for (auto& c : cands)
      if (std::abs(c.x - x) <= 1 && std::abs(c.y - y) <= 1) return &c;
    return nullptr;
  };
  for (auto& c : cands) {
    if (c.kind != MinutiaKind::Ending || !c.keep) continue;
    const auto starts = branch_starts(s, c.x, c.y);
    const Trace t = walk(s, c.x, c.y, starts[0].first, starts[0].second, len, cn);
    if (!t.hit_minutia || t.length >= len) continue;
    c.keep = false;
    if (Cand* o = find(t.x, t.y)) o->keep = false;
  }
  // Bridges: bifurcations closer than half a period.
  for (std::size_t i = 0; i < cands.size(); ++i)
    for (std::size_t j = i + 1; j < cands.size(); ++j) {
      if (cands[i].kind != MinutiaKind::Bifurcation || cands[j].kind != MinutiaKind::Bifurcation) continue;
      if (std::hypot(cands[i].x - cands[j].x, cands[i].y - cands[j].y) < period / 2)
        cands[i].keep = cands[j].keep = false;
    }

  std::vector<Minutia> out;
  for (const auto& c : cands)
    if (c.keep && interior(c.x, c.y))
      out.push_back({static_cast<double>(c.x), static_cast<double>(c.y), wrap2pi(c.dir), c.kind});
  return out;
}

// ---- rigid transforms -----------------------------------------------------------------

tps::Point RigidTransform::operator()(tps::Point p) const {
  const double c = std::cos(theta), s = std::sin(theta);
  const double x = p.x - cx, y = p.y - cy;
  return {c * x - s * y + cx + tx, s * x + c * y + cy + ty};
}

RigidTransform RigidTransform::inverse() const {
  // p = R^-1 (q - c - t) + c: same centre, angle -theta, t' = -R^-1 t.
  const double c = std::cos(theta), s = std::sin(theta);
  return {-(c * tx + s * ty), -(-s * tx + c * ty), -theta, cx, cy};
}

// ---- matching -----------------------------------------------------------------------

namespace {

struct Neighbour {
  double d, phi, delta;
};

std::vector<std::vector<Neighbour>> descriptors(const std::vector<Minutia>& m, int k) {
  std::vector<std::vector<Neighbour>> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t j = 0; j < m.size(); ++j)
      if (j != i) dist.emplace_back(std::hypot(m[j].x - m[i].x, m[j].y - m[i].y), j);
    std::sort(dist.begin(), dist.end());
    if (static_cast<int>(dist.size()) > k) dist.resize(k);
    for (auto [d, j] : dist)
      out[i].push_back({d, wrap_pm(std::atan2(m[j].y - m[i].y, m[j].x - m[i].x) - m[i].direction),
                        wrap_pm(m[j].direction - m[i].direction)});
  }
  return out;
}

// Mean over a's neighbours of the best capped match in b.
double descriptor_cost(const std::vector<Neighbour>& a, const std::vector<Neighbour>& b) {
  constexpr double kCap = 3.0;
  constexpr double kDist = 4.0;
  constexpr double kAngle = kPi / 12;
  if (a.empty()) return 0.0;
  double sum = 0;
  for (const auto& na : a) {
    double best = kCap;
    for (const auto& nb : b)
      best = std::min(best, std::fabs(na.d - nb.d) / kDist + std::fabs(wrap_pm(na.phi - nb.phi)) / kAngle +
                                std::fabs(wrap_pm(na.delta - nb.delta)) / kAngle);
    sum += best;
  }
  return sum / a.size();
}

std::vector<std::size_t> support(const std::vector<Minutia>& a, const std::vector<Minutia>& b,
                                 const std::vector<MinutiaPair>& cand, const RigidTransform& t,
                                 const MatchOptions& opt) {
  std::vector<std::size_t> in;
  for (std::size_t q = 0; q < cand.size(); ++q) {
    const auto& ma = a[cand[q].a];
    const auto& mb = b[cand[q].b];
    const tps::Point p = t({ma.x, ma.y});
    if (std::hypot(p.x - mb.x, p.y - mb.y) > opt.max_distance) continue;
    if (std::fabs(wrap_pm(mb.direction - ma.direction - t.theta)) > opt.max_angle) continue;
    in.push_back(q);
  }
  return in;
}

RigidTransform procrustes(const std::vector<Minutia>& a, const std::vector<Minutia>& b,
                          const std::vector<MinutiaPair>& cand, const std::vector<std::size_t>& idx) {
  double ax = 0, ay = 0, bx = 0, by = 0;
  for (auto q : idx) {
    ax += a[cand[q].a].x;
    ay += a[cand[q].a].y;
    bx += b[cand[q].b].x;
    by += b[cand[q].b].y;
  }
  const double n = static_cast<double>(idx.size());
  ax /= n;
  ay /= n;
  bx /= n;
  by /= n;
  double sc = 0, ss = 0;
  for (auto q : idx) {
    const double px = a[cand[q].a].x - ax, py = a[cand[q].a].y - ay;
    const double qx = b[cand[q].b].x - bx, qy = b[cand[q].b].y - by;
    sc += px * qx + py * qy;
    ss += px * qy - py * qx;
  }
  RigidTransform t;
  t.theta = (sc == 0 && ss == 0) ? 0.0 : std::atan2(ss, sc);
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  t.tx = bx - (c * ax - s * ay);
  t.ty = by - (s * ax + c * ay);
  return t;
}

}  // namespace

MatchResult match_minutiae(const std::vector<Minutia>& a, const std::vector<Minutia>& b,
                           const MatchOptions& opt) {
  MatchResult res;
  if (a.empty() || b.empty()) return res;
  const auto da = descriptors(a, opt.neighbours);
  const auto db = descriptors(b, opt.neighbours);

  struct Scored {
    double cost;
    std::size_t i, j;
  };
  std::vector<Scored> all;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      // Symmetric cost so that swapping the lists gives the same pairs.
      const double c = 0.5 * (descriptor_cost(da[i], db[j]) + descriptor_cost(db[j], da[i]));
      if (c <= opt.max_descriptor_cost) all.push_back({c, i, j});
    }
  std::sort(all.begin(), all.end(), [](const Scored& x, const Scored& y) {
    if (x.cost != y.cost) return x.cost < y.cost;
    if (x.i != y.i) return x.i < y.i;
    return x.j < y.j;
  });
  std::vector<char> used_a(a.size(), 0), used_b(b.size(), 0);
  std::vector<MinutiaPair> cand;
  for (const auto& s : all) {
    if (used_a[s.i] || used_b[s.j]) continue;
    used_a[s.i] = used_b[s.j] = 1;
    cand.push_back({s.i, s.j});
  }
  if (cand.empty()) return res;

  // Each greedy pair proposes a rigid motion; the best supported one wins.
  std::vector<std::size_t> best;
  RigidTransform best_t;
  for (const auto& p : cand) {
    RigidTransform t;
    t.theta = wrap_pm(b[p.b].direction - a[p.a].direction);
    const double c = std::cos(t.theta), s = std::sin(t.theta);
    t.tx = b[p.b].x - (c * a[p.a].x - s * a[p.a].y);
    t.ty = b[p.b].y - (s * a[p.a].x + c * a[p.a].y);
    auto in = support(a, b, cand, t, opt);
    if (in.size() > best.size()) {
      best = std::move(in);
      best_t = t;
    }
  }
  if (best.size() >= 2) {
    const RigidTransform refined = procrustes(a, b, cand, best);
    auto in = support(a, b, cand, refined, opt);
    if (in.size() >= best.size()) {
      best = std::move(in);
      best_t = refined;
    }
  }
  for (auto q : best) res.pairs.push_back(cand[q]);
  res.transform = best_t;
  return res;
}

// ---- rigid search ----------------------------------------------------------------------

namespace {

struct Usable {
  int cols = 0, rows = 0;
  std::vector<char> ok;
};

Usable usable_blocks(const ridge::OrientationField& o, const ridge::PeriodMap& p, const Mask& mask) {
  if (o.cols != p.cols || o.rows != p.rows) throw CoarseError("orientation and period grids differ");
  const auto bm = ridge::block_mask(mask, o.block, o.cols, o.rows);
  Usable u{o.cols, o.rows, std::vector<char>(static_cast<std::size_t>(o.cols) * o.rows, 0)};
  for (int by = 0; by < o.rows; ++by)
    for (int bx = 0; bx < o.cols; ++bx)
      u.ok[o.index(bx, by)] = bm(bx, by) && o.defined(bx, by) && p.defined(bx, by);
  return u;
}

struct Score {
  int consistent = -1;
  int common = 0;
  double theta = 0, tx = 0, ty = 0;
};

bool better(const Score& s, const Score& best) {
  if (s.consistent != best.consistent) return s.consistent > best.consistent;
  const double at = std::fabs(s.theta), ab = std::fabs(best.theta);
  if (std::fabs(at - ab) > 1e-12) return at < ab;
  return s.tx * s.tx + s.ty * s.ty < best.tx * best.tx + best.ty * best.ty;
}

}  // namespace

SearchResult rigid_search(const ridge::OrientationField& o_ref, const ridge::PeriodMap& p_ref,
                          const Mask& mask_ref, const ridge::OrientationField& o_in,
                          const ridge::PeriodMap& p_in, const Mask& mask_in, const SearchOptions& opt) {
  if (!(opt.shift_step > 0) || !(opt.angle_step_deg > 0) || opt.max_shift < 0 || opt.max_angle_deg < 0)
    throw CoarseError("rigid_search: bad search grid");
  if (o_ref.block != o_in.block) throw CoarseError("rigid_search: block sizes differ");
  const Usable ur = usable_blocks(o_ref, p_ref, mask_ref);
  const Usable ui = usable_blocks(o_in, p_in, mask_in);
  const int B = o_in.block;
  const double cx = (mask_in.width() - 1) / 2.0, cy = (mask_in.height() - 1) / 2.0;
  const double ogate = opt.orientation_gate_deg * kPi / 180.0;

  struct Blk {
    double x, y, ori, per;
  };
  std::vector<Blk> blocks;
  for (int by = 0; by < o_in.rows; ++by)
    for (int bx = 0; bx < o_in.cols; ++bx)
      if (ui.ok[o_in.index(bx, by)])
        blocks.push_back({o_in.center_x(bx), o_in.center_y(by), o_in.at(bx, by), p_in.at(bx, by)});

  // 0, +s, -s, +2s, -2s, ...
  std::vector<double> thetas = {0.0};
  const int na = static_cast<int>(std::floor(opt.max_angle_deg / opt.angle_step_deg + 1e-9));
  for (int k = 1; k <= na; ++k) {
    thetas.push_back(k * opt.angle_step_deg * kPi / 180.0);
    thetas.push_back(-k * opt.angle_step_deg * kPi / 180.0);
  }
  const int ns = static_cast<int>(std::floor(opt.max_shift / opt.shift_step + 1e-9));
  std::vector<double> shifts;
  for (int k = -ns; k <= ns; ++k) shifts.push_back(k * opt.shift_step);

  const double cos_gate = std::cos(2 * ogate) - 1e-12;
  std::vector<double> rc2(ur.ok.size()), rs2(ur.ok.size());
  for (std::size_t r = 0; r < ur.ok.size(); ++r) {
    rc2[r] = std::cos(2 * o_ref.value[r]);
    rs2[r] = std::sin(2 * o_ref.value[r]);
  }
  auto run_theta = [&](double th, int& max_common) {
    Score best;
    const double c = std::cos(th), s = std::sin(th);
    // Pixel position of every usable input block after the rotation.
    std::vector<double> qx(blocks.size()), qy(blocks.size()), ori(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const double x = blocks[i].x - cx, y = blocks[i].y - cy;
      qx[i] = c * x - s * y + cx + 0.5;
      qy[i] = s * x + c * y + cy + 0.5;
      ori[i] = blocks[i].ori + th;
    }
    std::vector<double> c2(blocks.size()), s2(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      c2[i] = std::cos(2 * ori[i]);
      s2[i] = std::sin(2 * ori[i]);
    }
    for (double ty : shifts)
      for (double tx : shifts) {
        int common = 0, consistent = 0;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
          const int bx = static_cast<int>(std::floor((qx[i] + tx) / B));
          const int by = static_cast<int>(std::floor((qy[i] + ty) / B));
          if (bx < 0 || by < 0 || bx >= ur.cols || by >= ur.rows) continue;
          const std::size_t r = o_ref.index(bx, by);
          if (!ur.ok[r]) continue;
          ++common;
          // Undirected angle difference <= gate  <=>  cos of the doubled difference >= cos(2 gate).
          consistent += std::fabs(blocks[i].per - p_ref.value[r]) <= opt.period_gate &&
                        c2[i] * rc2[r] + s2[i] * rs2[r] >= cos_gate;
        }
        max_common = std::max(max_common, common);
        if (common == 0) continue;
        const Score sc{consistent, common, th, tx, ty};
        if (best.consistent < 0 || better(sc, best)) best = sc;
      }
    return best;
  };

  std::vector<Score> per_theta(thetas.size());
  std::vector<int> commons(thetas.size(), 0);
  const int nt = std::max(1, std::min<int>(opt.threads, static_cast<int>(thetas.size())));
  if (nt == 1) {
    for (std::size_t k = 0; k < thetas.size(); ++k) per_theta[k] = run_theta(thetas[k], commons[k]);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < nt; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < thetas.size(); k += nt) per_theta[k] = run_theta(thetas[k], commons[k]);
      });
    for (auto& t : pool) t.join();
  }
  // Merge in theta order so the result does not depend on the thread count.
  Score best;
  for (std::size_t k = 0; k < thetas.size(); ++k)
    if (per_theta[k].consistent >= 0 && (best.consistent < 0 || better(per_theta[k], best)))
      best = per_theta[k];
  if (best.consistent < 0) throw CoarseError("no overlap");
  SearchResult res;
  res.transform = {best.tx, best.ty, best.theta, cx, cy};
  res.consistent = best.consistent;
  res.common = best.common;
  return res;
}

DisplacementField rigid_field(const RigidTransform& t, int ref_w, int ref_h) {
  const RigidTransform inv = t.inverse();
  DisplacementField f(ref_w, ref_h);
  for (int y = 0; y < ref_h; ++y)
    for (int x = 0; x < ref_w; ++x) {
      const tps::Point p = inv({static_cast<double>(x), static_cast<double>(y)});
      f.dx(x, y) = p.x - x;
      f.dy(x, y) = p.y - y;
    }
  return f;
}

// ---- coarse alignment -----------------------------------------------------------------

namespace {

double median_period(const ridge::PeriodMap& p) {
  std::vector<double> v;
  for (std::size_t i = 0; i < p.value.size(); ++i)
    if (p.valid[i]) v.push_back(p.value[i]);
  if (v.empty()) return 9.0;
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

nlohmann::json to_json(const RigidTransform& t) {
  return {{"tx", t.tx}, {"ty", t.ty}, {"theta_deg", t.theta * 180.0 / kPi}, {"cx", t.cx}, {"cy", t.cy}};
}

}  // namespace

CoarseResult coarse_align(const Image& input, const Image& ref, const CoarseOptions& opt,
                          const std::optional<std::vector<Minutia>>& minutiae_in,
                          const std::optional<std::vector<Minutia>>& minutiae_ref,
                          const std::optional<Mask>& mask_in, const std::optional<Mask>& mask_ref) {
  if (input.empty() || ref.empty()) throw CoarseError("coarse_align: empty image");
  if ((mask_in && !mask_in->same_shape(input)) || (mask_ref && !mask_ref->same_shape(ref)))
    throw CoarseError("coarse_align: mask and image differ in size");
  ridge::RidgeFeatures fi = ridge::analyze(input);
  ridge::RidgeFeatures fr = ridge::analyze(ref);
  if (mask_in) fi.mask = *mask_in;
  if (mask_ref) fr.mask = *mask_ref;

  auto builtin = [](const Image& img, const ridge::RidgeFeatures& f) {
    const auto e = ridge::enhance_and_phase(img, f.orientation, f.period, f.mask);
    return extract_minutiae(e.enhanced, f.mask, median_period(f.period));
  };
  const std::vector<Minutia> mi = minutiae_in ? *minutiae_in : builtin(input, fi);
  const std::vector<Minutia> mr = minutiae_ref ? *minutiae_ref : builtin(ref, fr);
  const MatchResult m = match_minutiae(mi, mr, opt.match);

  CoarseResult res;
  res.pairs = m.pairs.size();
  res.record = {{"minutiae_input", mi.size()},
                {"minutiae_ref", mr.size()},
                {"pairs", m.pairs.size()},
                {"source", minutiae_in && minutiae_ref ? "external" : "builtin"}};
  const int w = ref.width(), h = ref.height();

  if (m.pairs.size() >= opt.min_pairs) {
    // Fit on R's grid so the gather field comes straight out of the model.
    std::vector<tps::Point> src, dst;
    for (const auto& p : m.pairs) {
      src.push_back({mr[p.b].x, mr[p.b].y});
      dst.push_back({mi[p.a].x, mi[p.a].y});
    }
    try {
      const tps::TpsModel model = tps::tps_fit(src, dst);
      res.field = DisplacementField(w, h);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const tps::Point p = model({static_cast<double>(x), static_cast<double>(y)});
          res.field.dx(x, y) = p.x - x;
          res.field.dy(x, y) = p.y - y;
        }
      res.path = "tps";
      nlohmann::json ctrl = nlohmann::json::array();
      for (std::size_t i = 0; i < src.size(); ++i) ctrl.push_back({src[i].x, src[i].y, dst[i].x, dst[i].y});
      res.record["tps"] = {{"control", ctrl}, {"affine", model.affine}};
    } catch (const tps::TpsError& e) {
      // Collinear pairs cannot carry a TPS; the rigid search still can.
      res.record["tps_failed"] = e.what();
    }
  }
  if (res.path.empty()) {
    const SearchResult s =
        rigid_search(fr.orientation, fr.period, fr.mask, fi.orientation, fi.period, fi.mask, opt.search);
    res.field = rigid_field(s.transform, w, h);
    res.path = "rigid";
    res.record["rigid"] = to_json(s.transform);
    res.record["consistent_blocks"] = s.consistent;
    res.record["common_blocks"] = s.common;
  }
  res.record["path"] = res.path;
  res.aligned = warp_backward(input, res.field, 255.0);
  res.aligned_mask = warp_backward(fi.mask, res.field);
  return res;
}

}  // namespace pdr::coarse
