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

#include "lapx/attention.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "lapx/errors.hpp"
#include "lapx/ops.hpp"

namespace lapx {

namespace {

ParamTensor make_param(std::string name, Tensor value, std::vector<int> dims) {
  ParamTensor p;
  p.name = std::move(name);
  p.value = std::move(value);
  p.dims = std::move(dims);
  return p;
}

Var project(const Var& x, ParamTensor& w) {
  return conv2d(x, Var::param(w), Var(), {});
}

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapF = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                             Eigen::RowMajor>>;
using MapF =
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

constexpr int kAffinityRows = 256;

float* grad_of(detail::Node* n) {
  return (n != nullptr && n->requires_grad) ? n->grad_buffer().data() : nullptr;
}

// Softmax rows [r0, r0 + rb) of the affinity between embeddings th and ph.
MatD affinity_rows(const MatD& th, const MatD& ph, int r0, int rb) {
  MatD l = th.middleCols(r0, rb).transpose() * ph;
  for (int i = 0; i < rb; ++i) {
    l.row(i).array() -= l.row(i).maxCoeff();
    l.row(i) = l.row(i).array().exp().matrix();
    l.row(i) /= l.row(i).sum();
  }
  return l;
}

// dL from dA through the row softmax, in place.
void softmax_rows_backward(const MatD& a, MatD& d) {
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double dot = d.row(i).dot(a.row(i));
    d.row(i) = (a.row(i).array() * (d.row(i).array() - dot)).matrix();
  }
}

MatD embed(const Var& w, const MatD& xd) {
  const int inner = w.shape().n;
  return CMapF(w.value().data(), inner, w.shape().c).cast<double>() * xd;
}

MatD embed(detail::Node* w, const MatD& xd) {
  const Shape s = w->value().shape();
  return CMapF(w->value().data(), s.n, s.c).cast<double>() * xd;
}

void add_weight_grad(detail::Node* w, const MatD& g) {
  float* d = grad_of(w);
  if (d) MapF(d, g.rows(), g.cols()) += g.cast<float>();
}

// Logits of saturated affinities are large, so embeddings, logits, the
// normalisation and (for the context) the weighted sum stay in double.
Var fused_affinity(const Var& x, const Var& wt, const Var& wp) {
  const Shape s = x.shape();
  const int c = s.c;
  const int n = s.h * s.w;
  const int inner = wt.shape().n;
  const int64_t x_sz = static_cast<int64_t>(c) * n;
  const int64_t a_sz = static_cast<int64_t>(n) * n;
  Tensor a(Shape{s.n, 1, n, n});
  for (int b = 0; b < s.n; ++b) {
    const MatD xd = CMapF(x.value().data() + b * x_sz, c, n).cast<double>();
    const MatD th = embed(wt, xd), ph = embed(wp, xd);
    for (int r0 = 0; r0 < n; r0 += kAffinityRows) {
      const int rb = std::min(kAffinityRows, n - r0);
      MapF(a.data() + b * a_sz + static_cast<int64_t>(r0) * n, rb, n) =
          affinity_rows(th, ph, r0, rb).cast<float>();
    }
  }
  MacCounter::record(static_cast<int64_t>(s.n) * inner * n * (2 * static_cast<int64_t>(c) + n));
  detail::Node* xn = x.node();
  detail::Node* tn = wt.node();
  detail::Node* pn = wp.node();
  return Var::make(
      "nonlocal_affinity", std::move(a), {x, wt, wp},
      [xn, tn, pn, c, n, inner, x_sz, a_sz, batch = s.n](detail::Node& self) {
        float* dx = grad_of(xn);
        MatD gwt = MatD::Zero(inner, c), gwp = MatD::Zero(inner, c);
        for (int b = 0; b < batch; ++b) {
          const MatD xd = CMapF(xn->value().data() + b * x_sz, c, n).cast<double>();
          const MatD th = embed(tn, xd), ph = embed(pn, xd);
          MatD dth = MatD::Zero(inner, n), dph = MatD::Zero(inner, n);
          for (int r0 = 0; r0 < n; r0 += kAffinityRows) {
            const int rb = std::min(kAffinityRows, n - r0);
            const int64_t off = b * a_sz + static_cast<int64_t>(r0) * n;
            MatD dl = CMapF(self.grad.data() + off, rb, n).cast<double>();
            softmax_rows_backward(affinity_rows(th, ph, r0, rb), dl);
            dth.middleCols(r0, rb).noalias() += ph * dl.transpose();
            dph.noalias() += th.middleCols(r0, rb) * dl;
          }
          gwt.noalias() += dth * xd.transpose();
          gwp.noalias() += dph * xd.transpose();
          if (dx) {
            const MatD wtd = CMapF(tn->value().data(), inner, c).cast<double>();
            const MatD wpd = CMapF(pn->value().data(), inner, c).cast<double>();
            MapF(dx + b * x_sz, c, n) +=
                (wtd.transpose() * dth + wpd.transpose() * dph).cast<float>();
          }
        }
        add_weight_grad(tn, gwt);
        add_weight_grad(pn, gwp);
      });
}

// y = g(x) A^T as (N,inner,H,W), without materialising A.
Var fused_context(const Var& x, const Var& wt, const Var& wp, const Var& wg) {
  const Shape s = x.shape();
  const int c = s.c;
  const int n = s.h * s.w;
  const int inner = wt.shape().n;
  const int64_t x_sz = static_cast<int64_t>(c) * n;
  const int64_t y_sz = static_cast<int64_t>(inner) * n;
  Tensor y(Shape{s.n, inner, s.h, s.w});
  for (int b = 0; b < s.n; ++b) {
    const MatD xd = CMapF(x.value().data() + b * x_sz, c, n).cast<double>();
    const MatD th = embed(wt, xd), ph = embed(wp, xd), g = embed(wg, xd);
    MatD yd(inner, n);
    for (int r0 = 0; r0 < n; r0 += kAffinityRows) {
      const int rb = std::min(kAffinityRows, n - r0);
      yd.middleCols(r0, rb).noalias() = g * affinity_rows(th, ph, r0, rb).transpose();
    }
    MapF(y.data() + b * y_sz, inner, n) = yd.cast<float>();
  }
  MacCounter::record(static_cast<int64_t>(s.n) * inner * n *
                     (3 * static_cast<int64_t>(c) + 2 * static_cast<int64_t>(n)));
  detail::Node* xn = x.node();
  detail::Node* tn = wt.node();
  detail::Node* pn = wp.node();
  detail::Node* gn = wg.node();
  return Var::make(
      "nonlocal_context", std::move(y), {x, wt, wp, wg},
      [xn, tn, pn, gn, c, n, inner, x_sz, y_sz, batch = s.n](detail::Node& self) {
        float* dx = grad_of(xn);
        MatD gwt = MatD::Zero(inner, c), gwp = MatD::Zero(inner, c), gwg = MatD::Zero(inner, c);
        for (int b = 0; b < batch; ++b) {
          const MatD xd = CMapF(xn->value().data() + b * x_sz, c, n).cast<double>();
          const MatD th = embed(tn, xd), ph = embed(pn, xd), g = embed(gn, xd);
          const MatD dy = CMapF(self.grad.data() + b * y_sz, inner, n).cast<double>();
          MatD dth = MatD::Zero(inner, n), dph = MatD::Zero(inner, n), dg = MatD::Zero(inner, n);
          for (int r0 = 0; r0 < n; r0 += kAffinityRows) {
            const int rb = std::min(kAffinityRows, n - r0);
            const MatD a = affinity_rows(th, ph, r0, rb);
            dg.noalias() += dy.middleCols(r0, rb) * a;
            MatD dl = dy.middleCols(r0, rb).transpose() * g;
            softmax_rows_backward(a, dl);
            dth.middleCols(r0, rb).noalias() += ph * dl.transpose();
            dph.noalias() += th.middleCols(r0, rb) * dl;
          }
          gwt.noalias() += dth * xd.transpose();
          gwp.noalias() += dph * xd.transpose();
          gwg.noalias() += dg * xd.transpose();
          if (dx) {
            const MatD wtd = CMapF(tn->value().data(), inner, c).cast<double>();
            const MatD wpd = CMapF(pn->value().data(), inner, c).cast<double>();
            const MatD wgd = CMapF(gn->value().data(), inner, c).cast<double>();
            MapF(dx + b * x_sz, c, n) +=
                (wtd.transpose() * dth + wpd.transpose() * dph + wgd.transpose() * dg)
                    .cast<float>();
          }
        }
        add_weight_grad(tn, gwt);
        add_weight_grad(pn, gwp);
        add_weight_grad(gn, gwg);
      });
}

}  // namespace

EcaParams EcaParams::create(const std::string& prefix, std::mt19937& rng, int k) {
  if (k < 1 || k % 2 == 0) {
    throw ConfigError("ECA kernel size must be odd, got " + std::to_string(k));
  }
  // Pooled descriptors of unnormalised features are large, so a random kernel
  // can start the sigmoid saturated with no gradient; zero starts every gate at 0.5.
  (void)rng;
  return EcaParams{make_param(prefix + ".eca.kernel", Tensor(Shape{1, 1, 1, k}),
                              {1, 1, k})};
}

CbamSpatialParams CbamSpatialParams::create(const std::string& prefix,
                                            std::mt19937& rng) {
  const int fan_in = 2 * kCbamKernel * kCbamKernel;
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  return CbamSpatialParams{make_param(
      prefix + ".cbam.conv",
      rand_uniform(Shape{1, 2, kCbamKernel, kCbamKernel}, rng, -bound, bound),
      {1, 2, kCbamKernel, kCbamKernel})};
}

NonLocalParams NonLocalParams::create(const std::string& prefix, int channels,
                                      std::mt19937& rng) {
  if (channels <= 0 || channels % 8 != 0) {
    throw ConfigError("Non-Local needs channels divisible by 8, got " +
                      std::to_string(channels));
  }
  const int inner = channels / 8;
  auto conv = [&](const char* tag, int cout, int cin) {
    const float std = std::sqrt(2.0f / static_cast<float>(cout));
    return make_param(prefix + ".nl." + tag, randn(Shape{cout, cin, 1, 1}, rng, std),
                      {cout, cin, 1, 1});
  };
  NonLocalParams p;
  p.theta = conv("theta", inner, channels);
  p.phi = conv("phi", inner, channels);
  p.g = conv("g", inner, channels);
  p.wz = conv("wz", channels, inner);
  p.gamma = make_param(prefix + ".nl.gamma", Tensor::scalar(0.0f), {});
  return p;
}

Var eca_gate(const Var& x, EcaParams& p) {
  Var k = Var::param(p.kernel);
  return sigmoid(add(conv1d_channels(global_avg_pool(x), k),
                     conv1d_channels(global_max_pool(x), k)));
}

Var cbam_gate(const Var& x, CbamSpatialParams& p) {
  Var pooled = concat_channels(channel_mean(x), channel_max(x));
  return sigmoid(conv2d(pooled, Var::param(p.conv), Var(),
                        {1, kCbamKernel / 2, 1}));
}

Var eca_channel(const Var& x, EcaParams& p) { return mul(x, eca_gate(x, p)); }

Var cbam_spatial(const Var& x, CbamSpatialParams& p) {
  return mul(x, cbam_gate(x, p));
}

Var eca_cbam(const Var& x, EcaParams& eca, CbamSpatialParams& sp) {
  return cbam_spatial(eca_channel(x, eca), sp);
}

Var nonlocal_affinity(const Var& x, NonLocalParams& p) {
  return fused_affinity(x, Var::param(p.theta), Var::param(p.phi));
}

Var nonlocal_spatial(const Var& x, NonLocalParams& p) {
  const Shape s = x.shape();
  if (s.c != p.channels()) {
    throw ShapeError("nonlocal_spatial: input " + s.str() + " does not match " +
                     std::to_string(p.channels()) + " channels");
  }
  Var y = fused_context(x, Var::param(p.theta), Var::param(p.phi), Var::param(p.g));
  return add(x, mul(project(y, p.wz), Var::param(p.gamma)));
}

Var eca_nonlocal(const Var& x, EcaParams& eca, NonLocalParams& nl) {
  return nonlocal_spatial(eca_channel(x, eca), nl);
}

}  // namespace lapx
