// Copyright 2026 The LAPX Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "lapx/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "lapx/errors.hpp"

namespace lapx {

namespace {

using detail::Node;
using MatRM =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

struct ConvGeom {
  int n, cin, h, w;
  int cout, cin_g, cout_g, kh, kw;
  int stride, pad, groups;
  int ho, wo;

  bool depthwise() const { return cin_g == 1 && cout_g == 1; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && stride == 1 && pad == 0;
  }
  int64_t macs() const {
    return static_cast<int64_t>(n) * cout * ho * wo * cin_g * kh * kw;
  }
};

// Rows ordered (c, ky, kx), columns (oy, ox).
void im2col(const float* x, const ConvGeom& g, float* col) {
  const int p = g.ho * g.wo;
  for (int c = 0; c < g.cin_g; ++c) {
    const float* xc = x + static_cast<int64_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        float* row = col + ((static_cast<int64_t>(c) * g.kh + ky) * g.kw + kx) * p;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          float* dst = row + static_cast<int64_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0f);
            continue;
          }
          const float* src = xc + static_cast<int64_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeom& g, float* dx) {
  const int p = g.ho * g.wo;
  for (int c = 0; c < g.cin_g; ++c) {
    float* dxc = dx + static_cast<int64_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const float* row =
            col + ((static_cast<int64_t>(c) * g.kh + ky) * g.kw + kx) * p;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const float* src = row + static_cast<int64_t>(oy) * g.wo;
          float* dst = dxc + static_cast<int64_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Valid output range [lo, hi) along one axis for kernel tap k.
inline void tap_range(int k, int stride, int pad, int in, int out, int& lo,
                      int& hi) {
  // need 0 <= o*stride - pad + k < in
  lo = std::max(0, (pad - k + stride - 1) / stride);
  hi = std::min(out, (in + pad - k + stride - 1) / stride);
  if (pad - k < 0) lo = 0;
  if (hi < lo) hi = lo;
}

void depthwise_forward(const float* x, const float* w, const float* b,
                       const ConvGeom& g, float* y) {
  const int64_t in_plane = static_cast<int64_t>(g.h) * g.w;
  const int64_t out_plane = static_cast<int64_t>(g.ho) * g.wo;
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.cin; ++c) {
      const float* xp = x + (static_cast<int64_t>(n) * g.cin + c) * in_plane;
      const float* wp = w + static_cast<int64_t>(c) * g.kh * g.kw;
      float* yp = y + (static_cast<int64_t>(n) * g.cout + c) * out_plane;
      std::fill(yp, yp + out_plane, b ? b[c] : 0.0f);
      for (int ky = 0; ky < g.kh; ++ky) {
        int oy_lo, oy_hi;
        tap_range(ky, g.stride, g.pad, g.h, g.ho, oy_lo, oy_hi);
        for (int kx = 0; kx < g.kw; ++kx) {
          int ox_lo, ox_hi;
          tap_range(kx, g.stride, g.pad, g.w, g.wo, ox_lo, ox_hi);
          const float wv = wp[ky * g.kw + kx];
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            const float* xr =
                xp + static_cast<int64_t>(oy * g.stride - g.pad + ky) * g.w;
            float* yr = yp + static_cast<int64_t>(oy) * g.wo;
            const int off = kx - g.pad;
            if (g.stride == 1) {
              for (int ox = ox_lo; ox < ox_hi; ++ox) yr[ox] += wv * xr[ox + off];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) {
                yr[ox] += wv * xr[ox * g.stride + off];
              }
            }
          }
        }
      }
    }
  }
}

void depthwise_backward(const float* x, const float* w, const float* gy,
                        const ConvGeom& g, float* dx, float* dw, float* db) {
  const int64_t in_plane = static_cast<int64_t>(g.h) * g.w;
  const int64_t out_plane = static_cast<int64_t>(g.ho) * g.wo;
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.cin; ++c) {
      const float* xp = x + (static_cast<int64_t>(n) * g.cin + c) * in_plane;
      const float* gp = gy + (static_cast<int64_t>(n) * g.cout + c) * out_plane;
      const float* wp = w + static_cast<int64_t>(c) * g.kh * g.kw;
      float* dxp = dx ? dx + (static_cast<int64_t>(n) * g.cin + c) * in_plane
                      : nullptr;
      float* dwp = dw ? dw + static_cast<int64_t>(c) * g.kh * g.kw : nullptr;
      if (db) {
        float s = 0.0f;
        for (int64_t i = 0; i < out_plane; ++i) s += gp[i];
        db[c] += s;
      }
      for (int ky = 0; ky < g.kh; ++ky) {
        int oy_lo, oy_hi;
        tap_range(ky, g.stride, g.pad, g.h, g.ho, oy_lo, oy_hi);
        for (int kx = 0; kx < g.kw; ++kx) {
          int ox_lo, ox_hi;
          tap_range(kx, g.stride, g.pad, g.w, g.wo, ox_lo, ox_hi);
          const float wv = wp[ky * g.kw + kx];
          const int off = kx - g.pad;
          float acc = 0.0f;
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            const int64_t row = static_cast<int64_t>(oy * g.stride - g.pad + ky) * g.w;
            const float* gr = gp + static_cast<int64_t>(oy) * g.wo;
            const float* xr = xp + row;
            if (dxp) {
              float* dr = dxp + row;
              for (int ox = ox_lo; ox < ox_hi; ++ox) {
                dr[ox * g.stride + off] += wv * gr[ox];
              }
            }
            if (dwp) {
              for (int ox = ox_lo; ox < ox_hi; ++ox) {
                acc += gr[ox] * xr[ox * g.stride + off];
              }
            }
          }
          if (dwp) dwp[ky * g.kw + kx] += acc;
        }
      }
    }
  }
}

void conv_forward(const Tensor& x, const Tensor& w, const float* b,
                  const ConvGeom& g, Tensor& y) {
  if (g.depthwise()) {
    depthwise_forward(x.data(), w.data(), b, g, y.data());
    return;
  }
  const int k = g.cin_g * g.kh * g.kw;
  const int p = g.ho * g.wo;
  const bool direct = g.pointwise();
  FloatBuffer col(direct ? 0 : static_cast<size_t>(k) * p);
  for (int n = 0; n < g.n; ++n) {
    for (int gi = 0; gi < g.groups; ++gi) {
      const float* xg =
          x.data() + (static_cast<int64_t>(n) * g.cin + gi * g.cin_g) * g.h * g.w;
      const float* src = xg;
      if (!direct) {
        im2col(xg, g, col.data());
        src = col.data();
      }
      CMapRM wm(w.data() + static_cast<int64_t>(gi) * g.cout_g * k, g.cout_g, k);
      CMapRM cm(src, k, p);
      MapRM ym(y.data() + (static_cast<int64_t>(n) * g.cout + gi * g.cout_g) * p,
               g.cout_g, p);
      ym.noalias() = wm * cm;
      if (b) {
        for (int co = 0; co < g.cout_g; ++co) {
          ym.row(co).array() += b[gi * g.cout_g + co];
        }
      }
    }
  }
}

void conv_backward(const Tensor& x, const Tensor& w, const Tensor& gy,
                   const ConvGeom& g, float* dx, float* dw, float* db) {
  if (g.depthwise()) {
    depthwise_backward(x.data(), w.data(), gy.data(), g, dx, dw, db);
    return;
  }
  const int k = g.cin_g * g.kh * g.kw;
  const int p = g.ho * g.wo;
  const bool direct = g.pointwise();
  FloatBuffer col(direct ? 0 : static_cast<size_t>(k) * p);
  FloatBuffer dcol(dx ? static_cast<size_t>(k) * p : 0);
  for (int n = 0; n < g.n; ++n) {
    for (int gi = 0; gi < g.groups; ++gi) {
      const int64_t xoff = (static_cast<int64_t>(n) * g.cin + gi * g.cin_g) * g.h * g.w;
      CMapRM gym(gy.data() + (static_cast<int64_t>(n) * g.cout + gi * g.cout_g) * p,
                 g.cout_g, p);
      if (db) {
        for (int co = 0; co < g.cout_g; ++co) db[gi * g.cout_g + co] += gym.row(co).sum();
      }
      if (dw) {
        const float* src = x.data() + xoff;
        if (!direct) {
          im2col(src, g, col.data());
          src = col.data();
        }
        CMapRM cm(src, k, p);
        MapRM dwm(dw + static_cast<int64_t>(gi) * g.cout_g * k, g.cout_g, k);
        dwm.noalias() += gym * cm.transpose();
      }
      if (dx) {
        CMapRM wm(w.data() + static_cast<int64_t>(gi) * g.cout_g * k, g.cout_g, k);
        if (direct) {
          MapRM dxm(dx + xoff, k, p);
          dxm.noalias() += wm.transpose() * gym;
        } else {
          MapRM dcm(dcol.data(), k, p);
          dcm.noalias() = wm.transpose() * gym;
          col2im_add(dcol.data(), g, dx + xoff);
        }
      }
    }
  }
}

float* grad_ptr(Node* n) {
  return (n != nullptr && n->requires_grad) ? n->grad_buffer().data() : nullptr;
}

// Broadcast strides: 0 along axes of extent 1 that the output expands.
struct Strides {
  int64_t n, c, h, w;
};

Strides broadcast_strides(const Shape& s, const Shape& out) {
  Strides st{};
  st.w = (s.w == 1 && out.w != 1) ? 0 : 1;
  st.h = (s.h == 1 && out.h != 1) ? 0 : s.w;
  st.c = (s.c == 1 && out.c != 1) ? 0 : static_cast<int64_t>(s.h) * s.w;
  st.n = (s.n == 1 && out.n != 1) ? 0 : static_cast<int64_t>(s.c) * s.h * s.w;
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  auto one = [&](int x, int y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": cannot broadcast " + a.str() +
                     " with " + b.str());
  };
  return Shape{one(a.n, b.n), one(a.c, b.c), one(a.h, b.h), one(a.w, b.w)};
}

enum class BinOp { kAdd, kMul };

Var binary(const Var& a, const Var& b, BinOp op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const char* name = op == BinOp::kAdd ? "add" : "mul";
  const Shape out = broadcast_shape(sa, sb, name);
  Tensor y(out);
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  float* py = y.data();
  if (sa == out && sb == out) {
    const int64_t m = out.numel();
    if (op == BinOp::kAdd) {
      for (int64_t i = 0; i < m; ++i) py[i] = pa[i] + pb[i];
    } else {
      for (int64_t i = 0; i < m; ++i) py[i] = pa[i] * pb[i];
    }
  } else {
    const Strides ta = broadcast_strides(sa, out);
    const Strides tb = broadcast_strides(sb, out);
    int64_t i = 0;
    for (int n = 0; n < out.n; ++n)
      for (int c = 0; c < out.c; ++c)
        for (int h = 0; h < out.h; ++h) {
          const int64_t ia0 = n * ta.n + c * ta.c + h * ta.h;
          const int64_t ib0 = n * tb.n + c * tb.c + h * tb.h;
          for (int w = 0; w < out.w; ++w, ++i) {
            const float va = pa[ia0 + w * ta.w];
            const float vb = pb[ib0 + w * tb.w];
            py[i] = op == BinOp::kAdd ? va + vb : va * vb;
          }
        }
  }
  Node* an = a.node();
  Node* bn = b.node();
  return Var::make(name, std::move(y), {a, b}, [an, bn, out, op](Node& self) {
    const float* g = self.grad.data();
    const Shape sa = an->value().shape();
    const Shape sb = bn->value().shape();
    float* da = grad_ptr(an);
    float* db = grad_ptr(bn);
    const float* va = an->value().data();
    const float* vb = bn->value().data();
    const Strides ta = broadcast_strides(sa, out);
    const Strides tb = broadcast_strides(sb, out);
    int64_t i = 0;
    for (int n = 0; n < out.n; ++n)
      for (int c = 0; c < out.c; ++c)
        for (int h = 0; h < out.h; ++h) {
          const int64_t ia0 = n * ta.n + c * ta.c + h * ta.h;
          const int64_t ib0 = n * tb.n + c * tb.c + h * tb.h;
          for (int w = 0; w < out.w; ++w, ++i) {
            const int64_t ia = ia0 + w * ta.w;
            const int64_t ib = ib0 + w * tb.w;
            if (op == BinOp::kAdd) {
              if (da) da[ia] += g[i];
              if (db) db[ib] += g[i];
            } else {
              if (da) da[ia] += g[i] * vb[ib];
              if (db) db[ib] += g[i] * va[ia];
            }
          }
        }
  });
}

}  // namespace

int conv_out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

Var conv2d(const Var& x, const Var& w, const Var& bias, Conv2dOptions opt) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  if (opt.stride < 1 || opt.pad < 0 || opt.groups < 1) {
    throw ShapeError("conv2d: stride must be >=1, pad >=0, groups >=1");
  }
  if (xs.c % opt.groups != 0 || ws.n % opt.groups != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(xs.c) + "->" +
                     std::to_string(ws.n) + " not divisible by groups " +
                     std::to_string(opt.groups));
  }
  if (ws.c != xs.c / opt.groups) {
    throw ShapeError("conv2d: weight " + ws.str() + " does not match input " +
                     xs.str() + " with groups " + std::to_string(opt.groups));
  }
  if (xs.h + 2 * opt.pad < ws.h || xs.w + 2 * opt.pad < ws.w) {
    throw ShapeError("conv2d: padded input " + xs.str() +
                     " smaller than kernel " + ws.str());
  }
  if (bias && bias.value().numel() != ws.n) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias.value().numel()) +
                     " elements, expected " + std::to_string(ws.n));
  }
  ConvGeom g{xs.n, xs.c, xs.h, xs.w, ws.n, ws.c, ws.n / opt.groups, ws.h, ws.w,
             opt.stride, opt.pad, opt.groups, 0, 0};
  g.ho = conv_out_extent(xs.h, ws.h, opt.stride, opt.pad);
  g.wo = conv_out_extent(xs.w, ws.w, opt.stride, opt.pad);
  Tensor y(Shape{g.n, g.cout, g.ho, g.wo});
  conv_forward(x.value(), w.value(), bias ? bias.value().data() : nullptr, g, y);
  MacCounter::record(g.macs());

  Node* xn = x.node();
  Node* wn = w.node();
  Node* bn = bias ? bias.node() : nullptr;
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(bias);
  return Var::make("conv2d", std::move(y), std::move(inputs),
                   [xn, wn, bn, g](Node& self) {
                     conv_backward(xn->value(), wn->value(), self.grad, g,
                                   grad_ptr(xn), grad_ptr(wn), grad_ptr(bn));
                   });
}

MaxPoolResult maxpool2x2_forward(const Tensor& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("maxpool2x2: odd spatial extent in " + s.str());
  }
  const int ho = s.h / 2;
  const int wo = s.w / 2;
  MaxPoolResult r{Tensor(Shape{s.n, s.c, ho, wo}), {}};
  r.argmax.resize(static_cast<size_t>(r.out.numel()));
  const float* px = x.data();
  int64_t o = 0;
  for (int64_t plane = 0; plane < static_cast<int64_t>(s.n) * s.c; ++plane) {
    const float* xp = px + plane * s.h * s.w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++o) {
        int best = (2 * oy) * s.w + 2 * ox;
        float bv = xp[best];
        const int cand[3] = {best + 1, best + s.w, best + s.w + 1};
        for (int idx : cand) {
          if (xp[idx] > bv) {
            bv = xp[idx];
            best = idx;
          }
        }
        r.out[o] = bv;
        r.argmax[static_cast<size_t>(o)] = best;
      }
    }
  }
  return r;
}

Var maxpool2x2(const Var& x) {
  MaxPoolResult r = maxpool2x2_forward(x.value());
  Node* xn = x.node();
  const Shape in = x.shape();
  auto idx = std::make_shared<std::vector<int32_t>>(std::move(r.argmax));
  return Var::make("maxpool2x2", std::move(r.out), {x}, [xn, in, idx](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    const int64_t out_plane = static_cast<int64_t>(in.h / 2) * (in.w / 2);
    const int64_t in_plane = static_cast<int64_t>(in.h) * in.w;
    const float* g = self.grad.data();
    for (int64_t o = 0; o < self.grad.numel(); ++o) {
      dx[(o / out_plane) * in_plane + (*idx)[static_cast<size_t>(o)]] += g[o];
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  const Shape s = x.shape();
  Tensor y(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
  const float* px = x.value().data();
  float* py = y.data();
  const int wo = 2 * s.w;
  for (int64_t plane = 0; plane < static_cast<int64_t>(s.n) * s.c; ++plane) {
    const float* xp = px + plane * s.h * s.w;
    float* yp = py + plane * 4 * s.h * s.w;
    for (int iy = 0; iy < s.h; ++iy) {
      float* r0 = yp + static_cast<int64_t>(2 * iy) * wo;
      for (int ix = 0; ix < s.w; ++ix) {
        const float v = xp[iy * s.w + ix];
        r0[2 * ix] = v;
        r0[2 * ix + 1] = v;
      }
      std::copy(r0, r0 + wo, r0 + wo);
    }
  }
  Node* xn = x.node();
  return Var::make("upsample_nearest2x", std::move(y), {x}, [xn, s](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    const float* g = self.grad.data();
    const int wo = 2 * s.w;
    for (int64_t plane = 0; plane < static_cast<int64_t>(s.n) * s.c; ++plane) {
      const float* gp = g + plane * 4 * s.h * s.w;
      float* dp = dx + plane * s.h * s.w;
      for (int iy = 0; iy < s.h; ++iy) {
        const float* r0 = gp + static_cast<int64_t>(2 * iy) * wo;
        const float* r1 = r0 + wo;
        for (int ix = 0; ix < s.w; ++ix) {
          dp[iy * s.w + ix] +=
              r0[2 * ix] + r0[2 * ix + 1] + r1[2 * ix] + r1[2 * ix + 1];
        }
      }
    }
  });
}

Var batchnorm(const Var& x, const Var& gamma, const Var& beta,
              Tensor& running_mean, Tensor& running_var, BatchNormOptions opt) {
  const Shape s = x.shape();
  const int c_count = s.c;
  if (gamma.value().numel() != c_count || beta.value().numel() != c_count ||
      running_mean.numel() != c_count || running_var.numel() != c_count) {
    throw ShapeError("batchnorm: parameter extents do not match channels of " +
                     s.str());
  }
  if (opt.eps < 0.0f) throw ShapeError("batchnorm: eps must be non-negative");
  const int64_t plane = s.plane();
  const int64_t m = static_cast<int64_t>(s.n) * plane;
  const float* px = x.value().data();
  const float* pg = gamma.value().data();
  const float* pb = beta.value().data();

  std::vector<float> mean(c_count), inv_std(c_count);
  if (opt.mode == BnMode::kTrain) {
    for (int c = 0; c < c_count; ++c) {
      double acc = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const float* p = px + (static_cast<int64_t>(n) * c_count + c) * plane;
        for (int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(m);
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const float* p = px + (static_cast<int64_t>(n) * c_count + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(m);
      mean[c] = static_cast<float>(mu);
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
      running_mean[c] = (1.0f - opt.momentum) * running_mean[c] +
                        opt.momentum * static_cast<float>(mu);
      running_var[c] = (1.0f - opt.momentum) * running_var[c] +
                       opt.momentum * static_cast<float>(unbiased);
    }
  } else {
    for (int c = 0; c < c_count; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = 1.0f / std::sqrt(running_var[c] + opt.eps);
    }
  }

  Tensor y(s);
  auto xhat = std::make_shared<Tensor>(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < c_count; ++c) {
      const int64_t off = (static_cast<int64_t>(n) * c_count + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const float xh = (px[off + i] - mean[c]) * inv_std[c];
        (*xhat)[off + i] = xh;
        y[off + i] = pg[c] * xh + pb[c];
      }
    }
  }

  Node* xn = x.node();
  Node* gn = gamma.node();
  Node* bn = beta.node();
  const bool train = opt.mode == BnMode::kTrain;
  return Var::make(
      "batchnorm", std::move(y), {x, gamma, beta},
      [xn, gn, bn, xhat, inv_std, s, m, train](Node& self) {
        const float* g = self.grad.data();
        const float* pg = gn->value().data();
        float* dx = grad_ptr(xn);
        float* dg = grad_ptr(gn);
        float* db = grad_ptr(bn);
        const int64_t plane = s.plane();
        for (int c = 0; c < s.c; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (int n = 0; n < s.n; ++n) {
            const int64_t off = (static_cast<int64_t>(n) * s.c + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
              sum_g += g[off + i];
              sum_gx += static_cast<double>(g[off + i]) * (*xhat)[off + i];
            }
          }
          if (dg) dg[c] += static_cast<float>(sum_gx);
          if (db) db[c] += static_cast<float>(sum_g);
          if (!dx) continue;
          const float k = pg[c] * inv_std[c];
          if (train) {
            const float mg = static_cast<float>(sum_g / static_cast<double>(m));
            const float mgx = static_cast<float>(sum_gx / static_cast<double>(m));
            for (int n = 0; n < s.n; ++n) {
              const int64_t off = (static_cast<int64_t>(n) * s.c + c) * plane;
              for (int64_t i = 0; i < plane; ++i) {
                dx[off + i] += k * (g[off + i] - mg - (*xhat)[off + i] * mgx);
              }
            }
          } else {
            for (int n = 0; n < s.n; ++n) {
              const int64_t off = (static_cast<int64_t>(n) * s.c + c) * plane;
              for (int64_t i = 0; i < plane; ++i) dx[off + i] += k * g[off + i];
            }
          }
        }
      });
}

Var activation(const Var& x, Activation kind) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  const int64_t m = xv.numel();
  if (kind == Activation::kRelu) {
    for (int64_t i = 0; i < m; ++i) y[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  } else {
    for (int64_t i = 0; i < m; ++i) {
      const float v = xv[i];
      if (v >= 0.0f) {
        y[i] = 1.0f / (1.0f + std::exp(-v));
      } else {
        const float e = std::exp(v);
        y[i] = e / (1.0f + e);
      }
    }
  }
  Node* xn = x.node();
  const char* name = kind == Activation::kRelu ? "relu" : "sigmoid";
  return Var::make(name, std::move(y), {x}, [xn, kind](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    const float* g = self.grad.data();
    const int64_t m = self.grad.numel();
    if (kind == Activation::kRelu) {
      const float* xv = xn->value().data();
      for (int64_t i = 0; i < m; ++i) {
        if (xv[i] > 0.0f) dx[i] += g[i];
      }
    } else {
      const float* yv = self.value().data();
      for (int64_t i = 0; i < m; ++i) dx[i] += g[i] * yv[i] * (1.0f - yv[i]);
    }
  });
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n || sa.c != sb.c) {
    throw ShapeError("matmul: batch extents differ: " + sa.str() + " vs " +
                     sb.str());
  }
  const int m = trans_a ? sa.w : sa.h;
  const int k = trans_a ? sa.h : sa.w;
  const int kb = trans_b ? sb.w : sb.h;
  const int p = trans_b ? sb.h : sb.w;
  if (k != kb) {
    throw ShapeError("matmul: inner extents differ: " + sa.str() + " vs " +
                     sb.str());
  }
  const int batch = sa.n * sa.c;
  Tensor y(Shape{sa.n, sa.c, m, p});
  const int64_t a_sz = static_cast<int64_t>(sa.h) * sa.w;
  const int64_t b_sz = static_cast<int64_t>(sb.h) * sb.w;
  const int64_t y_sz = static_cast<int64_t>(m) * p;
  for (int i = 0; i < batch; ++i) {
    CMapRM am(a.value().data() + i * a_sz, sa.h, sa.w);
    CMapRM bm(b.value().data() + i * b_sz, sb.h, sb.w);
    MapRM ym(y.data() + i * y_sz, m, p);
    if (!trans_a && !trans_b) ym.noalias() = am * bm;
    if (trans_a && !trans_b) ym.noalias() = am.transpose() * bm;
    if (!trans_a && trans_b) ym.noalias() = am * bm.transpose();
    if (trans_a && trans_b) ym.noalias() = am.transpose() * bm.transpose();
  }
  MacCounter::record(static_cast<int64_t>(batch) * m * k * p);
  Node* an = a.node();
  Node* bn = b.node();
  return Var::make(
      "matmul", std::move(y), {a, b},
      [an, bn, sa, sb, m, p, batch, trans_a, trans_b](Node& self) {
        float* da = grad_ptr(an);
        float* db = grad_ptr(bn);
        const int64_t a_sz = static_cast<int64_t>(sa.h) * sa.w;
        const int64_t b_sz = static_cast<int64_t>(sb.h) * sb.w;
        const int64_t y_sz = static_cast<int64_t>(m) * p;
        for (int i = 0; i < batch; ++i) {
          CMapRM am(an->value().data() + i * a_sz, sa.h, sa.w);
          CMapRM bm(bn->value().data() + i * b_sz, sb.h, sb.w);
          CMapRM gm(self.grad.data() + i * y_sz, m, p);
          if (da) {
            MapRM dam(da + i * a_sz, sa.h, sa.w);
            if (!trans_a && !trans_b) dam.noalias() += gm * bm.transpose();
            if (trans_a && !trans_b) dam.noalias() += bm * gm.transpose();
            if (!trans_a && trans_b) dam.noalias() += gm * bm;
            if (trans_a && trans_b) dam.noalias() += bm.transpose() * gm.transpose();
          }
          if (db) {
            MapRM dbm(db + i * b_sz, sb.h, sb.w);
            if (!trans_a && !trans_b) dbm.noalias() += am.transpose() * gm;
            if (trans_a && !trans_b) dbm.noalias() += am * gm;
            if (!trans_a && trans_b) dbm.noalias() += gm.transpose() * am;
            if (trans_a && trans_b) dbm.noalias() += gm.transpose() * am.transpose();
          }
        }
      });
}

Var softmax_rows(const Var& mv) {
  const Tensor& x = mv.value();
  const Shape s = x.shape();
  Tensor y(s);
  const int64_t rows = static_cast<int64_t>(s.n) * s.c * s.h;
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x.data() + r * s.w;
    float* yr = y.data() + r * s.w;
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < s.w; ++j) mx = std::max(mx, xr[j]);
    double total = 0.0;
    for (int j = 0; j < s.w; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (int j = 0; j < s.w; ++j) yr[j] *= inv;
  }
  Node* xn = mv.node();
  return Var::make("softmax_rows", std::move(y), {mv}, [xn, s, rows](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    const float* g = self.grad.data();
    const float* yv = self.value().data();
    for (int64_t r = 0; r < rows; ++r) {
      const float* gr = g + r * s.w;
      const float* yr = yv + r * s.w;
      float dot = 0.0f;
      for (int j = 0; j < s.w; ++j) dot += gr[j] * yr[j];
      float* dr = dx + r * s.w;
      for (int j = 0; j < s.w; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var add(const Var& a, const Var& b) { return binary(a, b, BinOp::kAdd); }

Var mul(const Var& a, const Var& b) { return binary(a, b, BinOp::kMul); }

Var scale(const Var& x, float s) {
  Tensor y = x.value();
  y.scale_(s);
  Node* xn = x.node();
  return Var::make("scale", std::move(y), {x}, [xn, s](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    const float* g = self.grad.data();
    for (int64_t i = 0; i < self.grad.numel(); ++i) dx[i] += s * g[i];
  });
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (float v : x.value().values()) acc += v;
  Node* xn = x.node();
  return Var::make("sum", Tensor::scalar(static_cast<float>(acc)), {x},
                   [xn](Node& self) {
                     float* dx = grad_ptr(xn);
                     if (!dx) return;
                     const float g = self.grad[0];
                     const int64_t m = xn->value().numel();
                     for (int64_t i = 0; i < m; ++i) dx[i] += g;
                   });
}

Var global_avg_pool(const Var& x) {
  const Shape s = x.shape();
  const int64_t plane = s.plane();
  Tensor y(Shape{s.n, s.c, 1, 1});
  const float* px = x.value().data();
  for (int64_t p = 0; p < static_cast<int64_t>(s.n) * s.c; ++p) {
    double acc = 0.0;
    for (int64_t i = 0; i < plane; ++i) acc += px[p * plane + i];
    y[p] = static_cast<float>(acc / static_cast<double>(plane));
  }
  Node* xn = x.node();
  return Var::make("global_avg_pool", std::move(y), {x}, [xn, s](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    const int64_t plane = s.plane();
    const float inv = 1.0f / static_cast<float>(plane);
    for (int64_t p = 0; p < static_cast<int64_t>(s.n) * s.c; ++p) {
      const float g = self.grad[p] * inv;
      for (int64_t i = 0; i < plane; ++i) dx[p * plane + i] += g;
    }
  });
}

Var global_max_pool(const Var& x) {
  const Shape s = x.shape();
  const int64_t plane = s.plane();
  Tensor y(Shape{s.n, s.c, 1, 1});
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(s.n) * s.c);
  const float* px = x.value().data();
  for (int64_t p = 0; p < static_cast<int64_t>(s.n) * s.c; ++p) {
    int64_t best = 0;
    for (int64_t i = 1; i < plane; ++i) {
      if (px[p * plane + i] > px[p * plane + best]) best = i;
    }
    y[p] = px[p * plane + best];
    (*idx)[static_cast<size_t>(p)] = p * plane + best;
  }
  Node* xn = x.node();
  return Var::make("global_max_pool", std::move(y), {x}, [xn, idx](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    for (size_t p = 0; p < idx->size(); ++p) {
      dx[(*idx)[p]] += self.grad[static_cast<int64_t>(p)];
    }
  });
}

Var channel_mean(const Var& x) {
  const Shape s = x.shape();
  const int64_t plane = s.plane();
  Tensor y(Shape{s.n, 1, s.h, s.w});
  const float* px = x.value().data();
  const float inv = 1.0f / static_cast<float>(s.c);
  for (int n = 0; n < s.n; ++n) {
    float* yp = y.data() + n * plane;
    for (int c = 0; c < s.c; ++c) {
      const float* xp = px + (static_cast<int64_t>(n) * s.c + c) * plane;
      for (int64_t i = 0; i < plane; ++i) yp[i] += xp[i];
    }
    for (int64_t i = 0; i < plane; ++i) yp[i] *= inv;
  }
  Node* xn = x.node();
  return Var::make("channel_mean", std::move(y), {x}, [xn, s, inv](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    const int64_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
      const float* gp = self.grad.data() + n * plane;
      for (int c = 0; c < s.c; ++c) {
        float* dp = dx + (static_cast<int64_t>(n) * s.c + c) * plane;
        for (int64_t i = 0; i < plane; ++i) dp[i] += gp[i] * inv;
      }
    }
  });
}

Var channel_max(const Var& x) {
  const Shape s = x.shape();
  const int64_t plane = s.plane();
  Tensor y(Shape{s.n, 1, s.h, s.w});
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(s.n * plane));
  const float* px = x.value().data();
  for (int n = 0; n < s.n; ++n) {
    for (int64_t i = 0; i < plane; ++i) {
      int64_t best = static_cast<int64_t>(n) * s.c * plane + i;
      for (int c = 1; c < s.c; ++c) {
        const int64_t j = (static_cast<int64_t>(n) * s.c + c) * plane + i;
        if (px[j] > px[best]) best = j;
      }
      y[n * plane + i] = px[best];
      (*idx)[static_cast<size_t>(n * plane + i)] = best;
    }
  }
  Node* xn = x.node();
  return Var::make("channel_max", std::move(y), {x}, [xn, idx](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    for (size_t p = 0; p < idx->size(); ++p) {
      dx[(*idx)[p]] += self.grad[static_cast<int64_t>(p)];
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  const int64_t plane = sa.plane();
  const int c = sa.c + sb.c;
  Tensor y(Shape{sa.n, c, sa.h, sa.w});
  for (int n = 0; n < sa.n; ++n) {
    const float* pa = a.value().data() + static_cast<int64_t>(n) * sa.c * plane;
    const float* pb = b.value().data() + static_cast<int64_t>(n) * sb.c * plane;
    float* py = y.data() + static_cast<int64_t>(n) * c * plane;
    std::copy(pa, pa + sa.c * plane, py);
    std::copy(pb, pb + sb.c * plane, py + sa.c * plane);
  }
  Node* an = a.node();
  Node* bn = b.node();
  return Var::make("concat_channels", std::move(y), {a, b},
                   [an, bn, sa, sb, plane, c](Node& self) {
                     float* da = grad_ptr(an);
                     float* db = grad_ptr(bn);
                     for (int n = 0; n < sa.n; ++n) {
                       const float* g = self.grad.data() +
                                        static_cast<int64_t>(n) * c * plane;
                       if (da) {
                         float* d = da + static_cast<int64_t>(n) * sa.c * plane;
                         for (int64_t i = 0; i < sa.c * plane; ++i) d[i] += g[i];
                       }
                       if (db) {
                         float* d = db + static_cast<int64_t>(n) * sb.c * plane;
                         const float* gb = g + sa.c * plane;
                         for (int64_t i = 0; i < sb.c * plane; ++i) d[i] += gb[i];
                       }
                     }
                   });
}

Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(shape);
  Node* xn = x.node();
  return Var::make("reshape", std::move(y), {x}, [xn](Node& self) {
    float* dx = grad_ptr(xn);
    if (!dx) return;
    const float* g = self.grad.data();
    for (int64_t i = 0; i < self.grad.numel(); ++i) dx[i] += g[i];
  });
}

Var conv1d_channels(const Var& x, const Var& w) {
  const Shape s = x.shape();
  if (s.h != 1 || s.w != 1) {
    throw ShapeError("conv1d_channels expects (N,C,1,1), got " + s.str());
  }
  const int k = static_cast<int>(w.value().numel());
  if (k % 2 == 0) throw ShapeError("conv1d_channels: kernel size must be odd");
  const int pad = (k - 1) / 2;
  Tensor y(s);
  const float* px = x.value().data();
  const float* pw = w.value().data();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      float acc = 0.0f;
      for (int j = 0; j < k; ++j) {
        const int src = c + j - pad;
        if (src >= 0 && src < s.c) acc += pw[j] * px[n * s.c + src];
      }
      y[n * s.c + c] = acc;
    }
  }
  MacCounter::record(static_cast<int64_t>(s.n) * s.c * k);
  Node* xn = x.node();
  Node* wn = w.node();
  return Var::make("conv1d_channels", std::move(y), {x, w},
                   [xn, wn, s, k, pad](Node& self) {
                     float* dx = grad_ptr(xn);
                     float* dw = grad_ptr(wn);
                     const float* px = xn->value().data();
                     const float* pw = wn->value().data();
                     for (int n = 0; n < s.n; ++n) {
                       for (int c = 0; c < s.c; ++c) {
                         const float g = self.grad[n * s.c + c];
                         for (int j = 0; j < k; ++j) {
                           const int src = c + j - pad;
                           if (src < 0 || src >= s.c) continue;
                           if (dx) dx[n * s.c + src] += pw[j] * g;
                           if (dw) dw[j] += px[n * s.c + src] * g;
                         }
                       }
                     }
                   });
}

}  // namespace lapx
