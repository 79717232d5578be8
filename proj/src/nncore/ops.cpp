#include <algorithm>
#include <cmath>

#include "pdr/nn.hpp"

namespace pdr::nn {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw NnError(msg);
}

std::size_t plane(const Shape& s) { return static_cast<std::size_t>(s.h) * s.w; }

// Output index range [lo, hi) such that lo*stride + offset lies in [0, extent).
std::pair<int, int> valid_range(int out, int stride, int offset, int extent) {
  int lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  int hi = out;
  if (extent - 1 - offset < 0) {
    hi = 0;
  } else {
    hi = std::min(out, (extent - 1 - offset) / stride + 1);
  }
  return {lo, std::max(lo, hi)};
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, ConvSpec spec) {
  const Shape xs = x.shape();
  const Shape ks = kernel.shape();
  require(spec.stride >= 1 && spec.dilation >= 1 && spec.padding >= 0, "conv2d: bad spec");
  require(ks.c == xs.c, "conv2d: kernel expects " + std::to_string(ks.c) + " input channels, got " +
                            std::to_string(xs.c));
  if (bias.defined()) require(bias.shape() == Shape{1, ks.n, 1, 1}, "conv2d: bias shape");
  const int oh = (xs.h + 2 * spec.padding - spec.dilation * (ks.h - 1) - 1) / spec.stride + 1;
  const int ow = (xs.w + 2 * spec.padding - spec.dilation * (ks.w - 1) - 1) / spec.stride + 1;
  require(oh >= 1 && ow >= 1, "conv2d: input smaller than kernel footprint");
  const Shape os{xs.n, ks.n, oh, ow};

  // Visits every (output row, input row, kernel tap) combination, handing the
  // inner loop contiguous output and strided input rows.
  auto sweep = [xs, ks, os, spec](auto&& body) {
    for (int n = 0; n < xs.n; ++n)
      for (int co = 0; co < ks.n; ++co)
        for (int ci = 0; ci < ks.c; ++ci)
          for (int ky = 0; ky < ks.h; ++ky) {
            const int yoff = ky * spec.dilation - spec.padding;
            const auto [oy0, oy1] = valid_range(os.h, spec.stride, yoff, xs.h);
            for (int kx = 0; kx < ks.w; ++kx) {
              const int xoff = kx * spec.dilation - spec.padding;
              const auto [ox0, ox1] = valid_range(os.w, spec.stride, xoff, xs.w);
              if (ox0 >= ox1) continue;
              const std::size_t kidx = ((static_cast<std::size_t>(co) * ks.c + ci) * ks.h + ky) * ks.w + kx;
              for (int oy = oy0; oy < oy1; ++oy) {
                const int iy = oy * spec.stride + yoff;
                const std::size_t orow = ((static_cast<std::size_t>(n) * os.c + co) * os.h + oy) * os.w;
                const std::size_t irow = ((static_cast<std::size_t>(n) * xs.c + ci) * xs.h + iy) * xs.w;
                body(kidx, orow, irow + xoff, ox0, ox1);
              }
            }
          }
  };

  std::vector<double> out(os.size(), 0.0);
  if (bias.defined()) {
    for (int n = 0; n < os.n; ++n)
      for (int co = 0; co < os.c; ++co)
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(n) * os.c + co) * plane(os)),
                    plane(os), bias.data()[co]);
  }
  const double* xv = x.data().data();
  const double* kv = kernel.data().data();
  const int s = spec.stride;
  sweep([&](std::size_t kidx, std::size_t orow, std::size_t ibase, int ox0, int ox1) {
    const double wv = kv[kidx];
    double* o = out.data() + orow;
    const double* in = xv + ibase;
    for (int ox = ox0; ox < ox1; ++ox) o[ox] += wv * in[ox * s];
  });

  std::vector<Tensor> parents{x, kernel};
  if (bias.defined()) parents.push_back(bias);
  return make_op(os, std::move(out), parents, [sweep, s, has_bias = bias.defined()](Node& self) {
    const double* gy = self.grad.data();
    Node& xn = *self.parents[0];
    Node& kn = *self.parents[1];
    double* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
    double* gk = kn.requires_grad ? kn.grad_buffer().data() : nullptr;
    const double* xv = xn.value.data();
    const double* kv = kn.value.data();
    sweep([&](std::size_t kidx, std::size_t orow, std::size_t ibase, int ox0, int ox1) {
      const double* g = gy + orow;
      if (gx) {
        const double wv = kv[kidx];
        double* dst = gx + ibase;
        for (int ox = ox0; ox < ox1; ++ox) dst[ox * s] += wv * g[ox];
      }
      if (gk) {
        const double* in = xv + ibase;
        double acc = 0.0;
        for (int ox = ox0; ox < ox1; ++ox) acc += g[ox] * in[ox * s];
        gk[kidx] += acc;
      }
    });
    if (has_bias && self.parents[2]->requires_grad) {
      const Shape& os = self.shape;
      auto& gb = self.parents[2]->grad_buffer();
      for (int n = 0; n < os.n; ++n)
        for (int co = 0; co < os.c; ++co) {
          const double* g = gy + (static_cast<std::size_t>(n) * os.c + co) * plane(os);
          double acc = 0.0;
          for (std::size_t i = 0; i < plane(os); ++i) acc += g[i];
          gb[co] += acc;
        }
    }
  });
}

Tensor batchnorm(const Tensor& x, const Tensor& scale_t, const Tensor& shift, Tensor& running_mean,
                 Tensor& running_var, BnMode mode) {
  const Shape s = x.shape();
  require(s.n > 0 && plane(s) > 0, "batchnorm: empty batch");
  const Shape cs{1, s.c, 1, 1};
  require(scale_t.shape() == cs && shift.shape() == cs && running_mean.shape() == cs &&
              running_var.shape() == cs,
          "batchnorm: per-channel parameter shape mismatch");
  const std::size_t m = static_cast<std::size_t>(s.n) * plane(s);
  const std::size_t hw = plane(s);

  std::vector<double> mean(s.c), inv_std(s.c);
  for (int c = 0; c < s.c; ++c) {
    if (mode == BnMode::Train) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* p = x.data().data() + (static_cast<std::size_t>(n) * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(m);
      double ss = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* p = x.data().data() + (static_cast<std::size_t>(n) * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(m);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + kBnEps);
      running_mean.data()[c] = kBnMomentum * running_mean.data()[c] + (1.0 - kBnMomentum) * mu;
      running_var.data()[c] = kBnMomentum * running_var.data()[c] + (1.0 - kBnMomentum) * var;
    } else {
      mean[c] = running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(running_var.data()[c] + kBnEps);
    }
  }

  std::vector<double> xhat(s.size()), out(s.size());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * hw;
      const double g = scale_t.data()[c], b = shift.data()[c];
      for (std::size_t i = 0; i < hw; ++i) {
        xhat[base + i] = (x.data()[base + i] - mean[c]) * inv_std[c];
        out[base + i] = g * xhat[base + i] + b;
      }
    }

  return make_op(s, std::move(out), {x, scale_t, shift},
                 [xhat = std::move(xhat), inv_std, mode, s, hw, m](Node& self) {
                   const double* gy = self.grad.data();
                   Node& xn = *self.parents[0];
                   Node& gn = *self.parents[1];
                   Node& bn = *self.parents[2];
                   for (int c = 0; c < s.c; ++c) {
                     double sum_g = 0.0, sum_gx = 0.0;
                     for (int n = 0; n < s.n; ++n) {
                       const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * hw;
                       for (std::size_t i = 0; i < hw; ++i) {
                         sum_g += gy[base + i];
                         sum_gx += gy[base + i] * xhat[base + i];
                       }
                     }
                     if (gn.requires_grad) gn.grad_buffer()[c] += sum_gx;
                     if (bn.requires_grad) bn.grad_buffer()[c] += sum_g;
                     if (!xn.requires_grad) continue;
                     auto& gx = xn.grad_buffer();
                     const double k = gn.value[c] * inv_std[c];
                     const double mg = sum_g / static_cast<double>(m);
                     const double mgx = sum_gx / static_cast<double>(m);
                     for (int n = 0; n < s.n; ++n) {
                       const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * hw;
                       for (std::size_t i = 0; i < hw; ++i) {
                         if (mode == BnMode::Train) {
                           gx[base + i] += k * (gy[base + i] - mg - xhat[base + i] * mgx);
                         } else {
                           gx[base + i] += k * gy[base + i];
                         }
                       }
                     }
                   }
                 });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  trace_branches(x.data().data(), x.size());
  return make_op(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& xn = *self.parents[0];
    auto& gx = xn.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xn.value[i] > 0.0) gx[i] += self.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    if (an.requires_grad) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.value[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x.data()[i];
  return make_op(x.shape(), std::move(out), {x}, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_channels: no inputs");
  Shape s = xs[0].shape();
  s.c = 0;
  for (const auto& t : xs) {
    const Shape& ts = t.shape();
    require(ts.n == s.n && ts.h == s.h && ts.w == s.w, "concat_channels: spatial/batch mismatch");
    s.c += ts.c;
  }
  const std::size_t hw = plane(s);
  std::vector<double> out(s.size());
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const auto& t : xs) {
      const std::size_t len = static_cast<std::size_t>(t.shape().c) * hw;
      std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(n * len), len,
                  out.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(n) * s.c + c0) * hw));
      c0 += t.shape().c;
    }
  }
  return make_op(s, std::move(out), xs, [s, hw](Node& self) {
    for (int n = 0; n < s.n; ++n) {
      int c0 = 0;
      for (auto& p : self.parents) {
        const std::size_t len = static_cast<std::size_t>(p->shape.c) * hw;
        if (p->requires_grad) {
          auto& g = p->grad_buffer();
          const double* src = self.grad.data() + (static_cast<std::size_t>(n) * s.c + c0) * hw;
          for (std::size_t i = 0; i < len; ++i) g[n * len + i] += src[i];
        }
        c0 += p->shape.c;
      }
    }
  });
}

Tensor avgpool_global(const Tensor& x) {
  const Shape s = x.shape();
  const std::size_t hw = plane(s);
  require(hw > 0, "avgpool_global: empty spatial extent");
  std::vector<double> out(static_cast<std::size_t>(s.n) * s.c);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += x.data()[k * hw + i];
    out[k] = acc / static_cast<double>(hw);
  }
  return make_op({s.n, s.c, 1, 1}, std::move(out), {x}, [hw](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      const double v = self.grad[k] / static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) g[k * hw + i] += v;
    }
  });
}

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  const Shape s = x.shape();
  require(out_h >= 1 && out_w >= 1 && s.h >= 1 && s.w >= 1, "resize_bilinear: bad size");
  struct Tap {
    int i0, i1;
    double f;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(out);
    const double r = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      const double src = std::clamp((o + 0.5) * r - 0.5, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(src));
      t[o] = {i0, std::min(i0 + 1, in - 1), src - i0};
    }
    return t;
  };
  const auto ty = taps(s.h, out_h);
  const auto tx = taps(s.w, out_w);
  const Shape os{s.n, s.c, out_h, out_w};
  std::vector<double> out(os.size());
  for (int k = 0; k < s.n * s.c; ++k) {
    const double* in = x.data().data() + static_cast<std::size_t>(k) * plane(s);
    double* o = out.data() + static_cast<std::size_t>(k) * plane(os);
    for (int y = 0; y < out_h; ++y)
      for (int xx = 0; xx < out_w; ++xx) {
        const Tap& a = ty[y];
        const Tap& b = tx[xx];
        o[y * out_w + xx] = (1 - a.f) * ((1 - b.f) * in[a.i0 * s.w + b.i0] + b.f * in[a.i0 * s.w + b.i1]) +
                            a.f * ((1 - b.f) * in[a.i1 * s.w + b.i0] + b.f * in[a.i1 * s.w + b.i1]);
      }
  }
  return make_op(os, std::move(out), {x}, [ty, tx, s, os](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int k = 0; k < s.n * s.c; ++k) {
      double* gi = g.data() + static_cast<std::size_t>(k) * plane(s);
      const double* go = self.grad.data() + static_cast<std::size_t>(k) * plane(os);
      for (int y = 0; y < os.h; ++y)
        for (int xx = 0; xx < os.w; ++xx) {
          const Tap& a = ty[y];
          const Tap& b = tx[xx];
          const double v = go[y * os.w + xx];
          gi[a.i0 * s.w + b.i0] += (1 - a.f) * (1 - b.f) * v;
          gi[a.i0 * s.w + b.i1] += (1 - a.f) * b.f * v;
          gi[a.i1 * s.w + b.i0] += a.f * (1 - b.f) * v;
          gi[a.i1 * s.w + b.i1] += a.f * b.f * v;
        }
    }
  });
}

Tensor upsample_bilinear(const Tensor& x, int factor) {
  require(factor >= 1, "upsample_bilinear: factor must be >= 1");
  return resize_bilinear(x, x.shape().h * factor, x.shape().w * factor);
}

Tensor downsample_stride(const Tensor& x, int factor) {
  require(factor >= 1, "downsample_stride: factor must be >= 1");
  const Shape s = x.shape();
  const Shape os{s.n, s.c, (s.h + factor - 1) / factor, (s.w + factor - 1) / factor};
  std::vector<double> out(os.size());
  for (int k = 0; k < s.n * s.c; ++k)
    for (int y = 0; y < os.h; ++y)
      for (int xx = 0; xx < os.w; ++xx)
        out[k * plane(os) + y * os.w + xx] = x.data()[k * plane(s) + (y * factor) * s.w + xx * factor];
  return make_op(os, std::move(out), {x}, [s, os, factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int k = 0; k < s.n * s.c; ++k)
      for (int y = 0; y < os.h; ++y)
        for (int xx = 0; xx < os.w; ++xx)
          g[k * plane(s) + (y * factor) * s.w + xx * factor] += self.grad[k * plane(os) + y * os.w + xx];
  });
}

Tensor softmax_channels(const Tensor& x, int group) {
  const Shape s = x.shape();
  require(group >= 1 && s.c % group == 0,
          "softmax_channels: " + std::to_string(s.c) + " channels not divisible by group " +
              std::to_string(group));
  const std::size_t hw = plane(s);
  const int groups = s.c / group;
  std::vector<double> out(s.size());
  for (int n = 0; n < s.n; ++n)
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + gi * group) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        double mx = -INFINITY;
        for (int t = 0; t < group; ++t) mx = std::max(mx, x.data()[base + t * hw + p]);
        double z = 0.0;
        for (int t = 0; t < group; ++t) {
          const double e = std::exp(x.data()[base + t * hw + p] - mx);
          out[base + t * hw + p] = e;
          z += e;
        }
        for (int t = 0; t < group; ++t) out[base + t * hw + p] /= z;
      }
    }
  return make_op(s, std::move(out), {x}, [s, hw, group, groups](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& y = self.value;
    for (int n = 0; n < s.n; ++n)
      for (int gi = 0; gi < groups; ++gi) {
        const std::size_t base = (static_cast<std::size_t>(n) * s.c + gi * group) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          double dot = 0.0;
          for (int t = 0; t < group; ++t) dot += y[base + t * hw + p] * self.grad[base + t * hw + p];
          for (int t = 0; t < group; ++t) {
            const std::size_t i = base + t * hw + p;
            g[i] += y[i] * (self.grad[i] - dot);
          }
        }
      }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_op({1, 1, 1, 1}, {acc}, {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

}  // namespace pdr::nn
