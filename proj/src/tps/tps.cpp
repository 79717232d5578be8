#include "pdr/tps.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

namespace pdr::tps {

namespace {

bool collinear(const std::vector<Point>& pts) {
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    mx += p.x;
    my += p.y;
  }
  mx /= pts.size();
  my /= pts.size();
  double sxx = 0, syy = 0, sxy = 0;
  for (const auto& p : pts) {
    sxx += (p.x - mx) * (p.x - mx);
    syy += (p.y - my) * (p.y - my);
    sxy += (p.x - mx) * (p.y - my);
  }
  // Smallest eigenvalue of the scatter matrix relative to the largest.
  const double tr = sxx + syy;
  const double det = sxx * syy - sxy * sxy;
  if (tr <= 0) return true;
  const double disc = std::sqrt(std::max(0.0, tr * tr / 4 - det));
  const double lmin = tr / 2 - disc;
  const double lmax = tr / 2 + disc;
  return lmin <= 1e-12 * lmax;
}

}  // namespace

double kernel_u(double r2) { return r2 > 0.0 ? 0.5 * r2 * std::log(r2) : 0.0; }

Point TpsModel::operator()(Point p) const {
  double fx = affine[0][0] * p.x + affine[0][1] * p.y + affine[0][2];
  double fy = affine[1][0] * p.x + affine[1][1] * p.y + affine[1][2];
  for (std::size_t i = 0; i < control.size(); ++i) {
    const double dx = p.x - control[i].x, dy = p.y - control[i].y;
    const double u = kernel_u(dx * dx + dy * dy);
    fx += wx[i] * u;
    fy += wy[i] * u;
  }
  return {fx, fy};
}

TpsModel tps_fit(const std::vector<Point>& src, const std::vector<Point>& dst, double reg) {
  if (src.size() != dst.size()) throw TpsError("tps_fit: source/target size mismatch");
  if (reg < 0.0) throw TpsError("tps_fit: regularization must be non-negative");
  if (src.size() < 3 || collinear(src)) throw TpsError("insufficient control points");

  const auto n = static_cast<Eigen::Index>(src.size());
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n + 3, n + 3);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double dx = src[i].x - src[j].x, dy = src[i].y - src[j].y;
      L(i, j) = kernel_u(dx * dx + dy * dy);
    }
    L(i, i) += reg;
    L(i, n) = L(n, i) = 1.0;
    L(i, n + 1) = L(n + 1, i) = src[i].x;
    L(i, n + 2) = L(n + 2, i) = src[i].y;
    rhs(i, 0) = dst[i].x;
    rhs(i, 1) = dst[i].y;
  }

  const Eigen::FullPivLU<Eigen::MatrixXd> lu(L);
  if (!lu.isInvertible()) throw TpsError("tps_fit: singular system (duplicate control points?)");
  const Eigen::MatrixXd sol = lu.solve(rhs);

  TpsModel m;
  m.control = src;
  m.wx.resize(src.size());
  m.wy.resize(src.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    m.wx[i] = sol(i, 0);
    m.wy[i] = sol(i, 1);
  }
  for (int axis = 0; axis < 2; ++axis) {
    m.affine[axis] = {sol(n + 1, axis), sol(n + 2, axis), sol(n, axis)};
  }
  return m;
}

std::vector<Point> tps_eval(const TpsModel& model, const std::vector<Point>& pts) {
  std::vector<Point> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(model(p));
  return out;
}

DisplacementField tps_extrapolate_field(const DisplacementField& field, const Mask& overlap,
                                        const ExtrapolateOptions& opt) {
  if (!field.dx.same_shape(overlap)) throw TpsError("tps_extrapolate_field: mask size mismatch");
  const std::size_t inside = count(overlap);
  if (inside == 0) throw TpsError("tps_extrapolate_field: empty overlap");
  if (inside == overlap.size()) return field;

  const int w = field.width(), h = field.height();
  std::vector<Point> src, dst;
  for (int stride = std::max(1, opt.stride);; ++stride) {
    src.clear();
    dst.clear();
    const int off = stride / 2;
    for (int y = off; y < h; y += stride) {
      for (int x = off; x < w; x += stride) {
        if (!overlap(x, y)) continue;
        src.push_back({static_cast<double>(x), static_cast<double>(y)});
        dst.push_back({field.dx(x, y), field.dy(x, y)});
      }
    }
    if (src.size() <= opt.max_points) break;
  }
  if (src.size() < 3) {
    // Overlap too small for the stride grid: take every overlap cell.
    src.clear();
    dst.clear();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!overlap(x, y)) continue;
        src.push_back({static_cast<double>(x), static_cast<double>(y)});
        dst.push_back({field.dx(x, y), field.dy(x, y)});
      }
    }
  }

  DisplacementField out = field;
  TpsModel model;
  bool have_model = false;
  if (src.size() >= 3 && !collinear(src) && src.size() <= 4 * opt.max_points) {
    model = tps_fit(src, dst, opt.reg);
    have_model = true;
  }
  double mx = 0, my = 0;
  if (!have_model) {
    // Degenerate overlap: extend by the mean displacement.
    for (const auto& d : dst) {
      mx += d.x;
      my += d.y;
    }
    mx /= dst.size();
    my /= dst.size();
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (overlap(x, y)) continue;
      if (have_model) {
        const Point v = model({static_cast<double>(x), static_cast<double>(y)});
        out.dx(x, y) = v.x;
        out.dy(x, y) = v.y;
      } else {
        out.dx(x, y) = mx;
        out.dy(x, y) = my;
      }
    }
  }
  return out;
}

std::vector<Correspondence> read_correspondences(std::istream& in) {
  std::vector<Correspondence> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Correspondence c;
    if (!(ls >> c.a.x >> c.a.y >> c.b.x >> c.b.y)) {
      throw TpsError("correspondence file: malformed line " + std::to_string(lineno));
    }
    out.push_back(c);
  }
  return out;
}

void write_correspondences(std::ostream& out, const std::vector<Correspondence>& pairs) {
  out << std::setprecision(17);
  for (const auto& c : pairs) out << c.a.x << ' ' << c.a.y << ' ' << c.b.x << ' ' << c.b.y << '\n';
}

void write_model(std::ostream& out, const TpsModel& m) {
  out << std::setprecision(17);
  out << "TPS " << m.control.size() << '\n';
  out << "affine " << m.affine[0][0] << ' ' << m.affine[0][1] << ' ' << m.affine[0][2] << ' '
      << m.affine[1][0] << ' ' << m.affine[1][1] << ' ' << m.affine[1][2] << '\n';
  for (std::size_t i = 0; i < m.control.size(); ++i) {
    out << m.control[i].x << ' ' << m.control[i].y << ' ' << m.wx[i] << ' ' << m.wy[i] << '\n';
  }
}

TpsModel read_model(std::istream& in) {
  std::string tag;
  std::size_t n = 0;
  if (!(in >> tag >> n) || tag != "TPS") throw TpsError("tps model: missing header");
  TpsModel m;
  if (!(in >> tag) || tag != "affine") throw TpsError("tps model: missing affine row");
  for (auto& row : m.affine) {
    for (auto& v : row) {
      if (!(in >> v)) throw TpsError("tps model: truncated affine row");
    }
  }
  m.control.resize(n);
  m.wx.resize(n);
  m.wy.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(in >> m.control[i].x >> m.control[i].y >> m.wx[i] >> m.wy[i])) {
      throw TpsError("tps model: truncated control points");
    }
  }
  return m;
}

}  // namespace pdr::tps
