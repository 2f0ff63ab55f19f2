// Copyright 2026 The gmflow-desk Authors. All Rights Reserved.
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

#pragma once

// Differentiable ops recorded on a Graph. Each op computes its forward value
// eagerly and registers a closure that pushes the output gradient back to
// whichever inputs need one.

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "gmflow/graph.hpp"
#include "gmflow/ops.hpp"

namespace gmflow::ad {

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  require_same_shape(g.value(a).shape(), g.value(b).shape(), "add");
  Tensor<T> out = g.value(a);
  const auto& vb = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  return g.emit(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad(self);
    for (Var in : {a, b}) {
      if (!g.needs_grad(in)) continue;
      auto& gi = g.grad(in);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    }
  });
}

template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  require_same_shape(g.value(a).shape(), g.value(b).shape(), "mul");
  Tensor<T> out = g.value(a);
  const auto& vb = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  return g.emit(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad(self);
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    if (g.needs_grad(a)) {
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb[i];
    }
    if (g.needs_grad(b)) {
      auto& gb = g.grad(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
    }
  });
}

/// scale * x + shift, elementwise.
template <class T>
Var affine(Graph<T>& g, Var x, T scale, T shift = T(0)) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.values()) v = scale * v + shift;
  return g.emit(std::move(out), {x}, [x, scale](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += scale * go[i];
  });
}

enum class Activation { relu, silu };

namespace impl {

// `deriv(x, y)` returns dy/dx given input and output.
template <class T, class F, class D>
Var unary(Graph<T>& g, Var x, F f, D deriv) {
  Tensor<T> out = map(g.value(x), f);
  return g.emit(std::move(out), {x}, [x, deriv](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad(self);
    const auto& vx = g.value(x);
    const auto& vy = g.value(Var{self});
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * deriv(vx[i], vy[i]);
  });
}

}  // namespace impl

template <class T>
Var sigmoid(Graph<T>& g, Var x) {
  return impl::unary(g, x, [](T v) { return gmflow::sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var tanh(Graph<T>& g, Var x) {
  return impl::unary(g, x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var relu(Graph<T>& g, Var x) {
  const auto& vx = g.value(x);
  auto* slot = g.branch_slot(vx.size());
  Tensor<T> out(vx.shape());
  std::vector<std::uint8_t> on(vx.size());
  for (std::size_t i = 0; i < vx.size(); ++i) {
    on[i] = static_cast<std::uint8_t>(g.decide(slot, i, vx[i] > T(0)));
    out[i] = on[i] ? vx[i] : T(0);
  }
  return g.emit(std::move(out), {x}, [x, on = std::move(on)](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (on[i]) gx[i] += go[i];
  });
}

template <class T>
Var silu(Graph<T>& g, Var x) {
  return impl::unary(g, x, [](T v) { return gmflow::silu(v); }, [](T v, T) {
    const T s = gmflow::sigmoid(v);
    return s * (T(1) + v * (T(1) - s));
  });
}

template <class T>
Var activate(Graph<T>& g, Var x, Activation act) {
  return act == Activation::relu ? relu(g, x) : silu(g, x);
}

/// Concatenates rank-3 maps along the channel axis.
template <class T>
Var concat_channels(Graph<T>& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_channels: no inputs");
  const auto& s0 = g.value(parts[0]).shape();
  require_rank(s0, 3, "concat_channels");
  std::size_t channels = 0;
  for (Var p : parts) {
    const auto& s = g.value(p).shape();
    require_rank(s, 3, "concat_channels");
    if (s[1] != s0[1] || s[2] != s0[2])
      throw Error("concat_channels: spatial mismatch " + shape_str(s0) + " vs " + shape_str(s));
    channels += s[0];
  }
  Tensor<T> out({channels, s0[1], s0[2]});
  std::size_t offset = 0;
  for (Var p : parts) {
    const auto& v = g.value(p);
    std::copy(v.values().begin(), v.values().end(), out.data() + offset);
    offset += v.size();
  }
  return g.emit(std::move(out), parts, [parts](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad(self);
    std::size_t offset = 0;
    for (Var p : parts) {
      const std::size_t n = g.value(p).size();
      if (g.needs_grad(p)) {
        auto& gp = g.grad(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += go[offset + i];
      }
      offset += n;
    }
  });
}

/// Zero-padded cross-correlation; `bias` may be omitted by passing nullopt.
template <class T>
Var conv2d(Graph<T>& g, Var x, Var weight, std::optional<Var> bias, std::size_t stride, std::size_t pad) {
  const auto& vx = g.value(x);
  const auto& vw = g.value(weight);
  const auto geom = ConvGeometry::make(vx.shape(), vw.shape(), stride, pad);
  Tensor<T> out = gmflow::conv2d(vx, vw, stride, pad, bias ? &g.value(*bias) : nullptr);
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return g.emit(std::move(out), inputs, [x, weight, bias, geom](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad(self);
    ConstMatMap<T> dout(go.data(), geom.out_c, geom.pixels());
    const auto& vx = g.value(x);
    std::vector<T> cols;
    const T* col_ptr = vx.data();
    if (!geom.pointwise()) {
      cols.resize(geom.patch() * geom.pixels());
      detail::im2col(geom, vx.data(), cols.data());
      col_ptr = cols.data();
    }
    if (g.needs_grad(weight)) {
      MatMap<T> dw(g.grad(weight).data(), geom.out_c, geom.patch());
      dw.noalias() += dout * ConstMatMap<T>(col_ptr, geom.patch(), geom.pixels()).transpose();
    }
    if (bias && g.needs_grad(*bias)) {
      auto& db = g.grad(*bias);
      for (std::size_t c = 0; c < geom.out_c; ++c) db[c] += gmflow::detail::row_sum(go.data() + c * geom.pixels(), geom.pixels());
    }
    if (g.needs_grad(x)) {
      ConstMatMap<T> w(g.value(weight).data(), geom.out_c, geom.patch());
      if (geom.pointwise()) {
        MatMap<T> dx(g.grad(x).data(), geom.in_c, geom.pixels());
        dx.noalias() += w.transpose() * dout;
      } else {
        RowMatrix<T> dcols = w.transpose() * dout;
        detail::col2im_add(geom, dcols.data(), g.grad(x).data());
      }
    }
  });
}

/// Per-pixel linear map over channels: [C_in, H, W] -> [C_out, H, W], with
/// weight [C_out, C_in] and bias [C_out].
template <class T>
Var linear_channels(Graph<T>& g, Var x, Var weight, Var bias) {
  const auto& vx = g.value(x);
  const auto& vw = g.value(weight);
  require_rank(vx.shape(), 3, "linear_channels input");
  require_rank(vw.shape(), 2, "linear_channels weight");
  if (vw.dim(1) != vx.dim(0) || g.value(bias).size() != vw.dim(0))
    throw Error("linear_channels: weight " + shape_str(vw.shape()) + " incompatible with input " +
                shape_str(vx.shape()));
  const std::size_t cin = vx.dim(0), cout = vw.dim(0), np = vx.dim(1) * vx.dim(2);
  Tensor<T> out({cout, vx.dim(1), vx.dim(2)});
  MatMap<T> o(out.data(), cout, np);
  o.noalias() = ConstMatMap<T>(vw.data(), cout, cin) * ConstMatMap<T>(vx.data(), cin, np);
  const auto& vb = g.value(bias);
  for (std::size_t c = 0; c < cout; ++c) o.row(c).array() += vb[c];
  return g.emit(std::move(out), {x, weight, bias}, [x, weight, bias, cin, cout, np](Graph<T>& g, std::size_t self) {
    ConstMatMap<T> dout(g.grad(self).data(), cout, np);
    if (g.needs_grad(weight)) {
      MatMap<T> dw(g.grad(weight).data(), cout, cin);
      dw.noalias() += dout * ConstMatMap<T>(g.value(x).data(), cin, np).transpose();
    }
    if (g.needs_grad(bias)) {
      auto& db = g.grad(bias);
      for (std::size_t c = 0; c < cout; ++c) db[c] += gmflow::detail::row_sum(g.grad(self).data() + c * np, np);
    }
    if (g.needs_grad(x)) {
      MatMap<T> dx(g.grad(x).data(), cin, np);
      dx.noalias() += ConstMatMap<T>(g.value(weight).data(), cout, cin).transpose() * dout;
    }
  });
}

/// Layer norm over the channel vector of every pixel of a [C, H, W] map.
template <class T>
Var layer_norm_channels(Graph<T>& g, Var x, Var gain, Var bias, T eps = T(1e-5)) {
  const auto& vx = g.value(x);
  require_rank(vx.shape(), 3, "layer_norm_channels");
  const std::size_t c = vx.dim(0), np = vx.dim(1) * vx.dim(2);
  if (g.value(gain).size() != c || g.value(bias).size() != c)
    throw Error("layer_norm_channels: gain/bias length does not match " + shape_str(vx.shape()));
  const auto& vg = g.value(gain);
  const auto& vb = g.value(bias);
  Tensor<T> out(vx.shape());
  std::vector<T> inv_std(np);
  for (std::size_t p = 0; p < np; ++p) {
    T mean = 0;
    for (std::size_t k = 0; k < c; ++k) mean += vx[k * np + p];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t k = 0; k < c; ++k) var += (vx[k * np + p] - mean) * (vx[k * np + p] - mean);
    var /= static_cast<T>(c);
    inv_std[p] = T(1) / std::sqrt(var + eps);
    for (std::size_t k = 0; k < c; ++k) out[k * np + p] = (vx[k * np + p] - mean) * inv_std[p] * vg[k] + vb[k];
  }
  return g.emit(std::move(out), {x, gain, bias},
                [x, gain, bias, c, np, inv_std = std::move(inv_std)](Graph<T>& g, std::size_t self) {
                  const auto& go = g.grad(self);
                  const auto& vx = g.value(x);
                  const auto& vg = g.value(gain);
                  std::vector<T> xhat(c), dxhat(c);
                  for (std::size_t p = 0; p < np; ++p) {
                    T mean = 0;
                    for (std::size_t k = 0; k < c; ++k) mean += vx[k * np + p];
                    mean /= static_cast<T>(c);
                    T m1 = 0, m2 = 0;
                    for (std::size_t k = 0; k < c; ++k) {
                      xhat[k] = (vx[k * np + p] - mean) * inv_std[p];
                      dxhat[k] = go[k * np + p] * vg[k];
                      m1 += dxhat[k];
                      m2 += dxhat[k] * xhat[k];
                    }
                    m1 /= static_cast<T>(c);
                    m2 /= static_cast<T>(c);
                    if (g.needs_grad(gain)) {
                      auto& gg = g.grad(gain);
                      for (std::size_t k = 0; k < c; ++k) gg[k] += go[k * np + p] * xhat[k];
                    }
                    if (g.needs_grad(bias)) {
                      auto& gb = g.grad(bias);
                      for (std::size_t k = 0; k < c; ++k) gb[k] += go[k * np + p];
                    }
                    if (g.needs_grad(x)) {
                      auto& gx = g.grad(x);
                      for (std::size_t k = 0; k < c; ++k)
                        gx[k * np + p] += inv_std[p] * (dxhat[k] - m1 - xhat[k] * m2);
                    }
                  }
                });
}

template <class T>
Var sum(Graph<T>& g, Var x) {
  T s = 0;
  for (T v : g.value(x).values()) s += v;
  return g.emit(Tensor<T>({1}, s), {x}, [x](Graph<T>& g, std::size_t self) {
    const T go = g.grad(self)[0];
    for (auto& v : g.grad(x).values()) v += go;
  });
}

/// Scalar sum_i weights[i] * terms[i]; every term must be a scalar.
template <class T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw Error("weighted_sum: terms/weights length mismatch");
  T s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (g.value(terms[i]).size() != 1) throw Error("weighted_sum: non-scalar term");
    s += weights[i] * g.value(terms[i])[0];
  }
  return g.emit(Tensor<T>({1}, s), terms, [terms, weights](Graph<T>& g, std::size_t self) {
    const T go = g.grad(self)[0];
    for (std::size_t i = 0; i < terms.size(); ++i)
      if (g.needs_grad(terms[i])) g.grad(terms[i])[0] += weights[i] * go;
  });
}

/// mean |pred - target| over every element.
template <class T>
Var l1_mean(Graph<T>& g, Var pred, const Tensor<T>& target) {
  const auto& vp = g.value(pred);
  require_same_shape(vp.shape(), target.shape(), "l1_mean");
  auto* slot = g.branch_slot(vp.size());
  std::vector<std::int8_t> sign(vp.size());
  T s = 0;
  for (std::size_t i = 0; i < vp.size(); ++i) {
    const T d = vp[i] - target[i];
    sign[i] = static_cast<std::int8_t>(g.decide(slot, i, d > T(0) ? 1 : (d < T(0) ? -1 : 0)));
    s += sign[i] * d;
  }
  const T n = static_cast<T>(vp.size());
  return g.emit(Tensor<T>({1}, s / n), {pred}, [pred, n, sign = std::move(sign)](Graph<T>& g, std::size_t self) {
    const T go = g.grad(self)[0] / n;
    auto& gp = g.grad(pred);
    for (std::size_t i = 0; i < sign.size(); ++i) gp[i] += sign[i] * go;
  });
}

/// Per-axis interpolation taps for resizing a length-n axis by `factor` with
/// pixel-centre alignment; samples beyond the first/last centre clamp.
struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline AxisTaps upsample_axis(std::size_t n, std::size_t factor) {
  AxisTaps t;
  const std::size_t m = n * factor;
  t.lo.resize(m);
  t.hi.resize(m);
  t.frac.resize(m);
  for (std::size_t o = 0; o < m; ++o) {
    double s = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    const auto lo = static_cast<std::size_t>(std::floor(s));
    t.lo[o] = lo;
    t.hi[o] = std::min(lo + 1, n - 1);
    t.frac[o] = s - static_cast<double>(lo);
  }
  return t;
}

/// Bilinear resize of every channel by an integer factor, with all values
/// multiplied by `value_scale`.
template <class T>
Var upsample_bilinear(Graph<T>& g, Var x, std::size_t factor, T value_scale) {
  const auto& vx = g.value(x);
  require_rank(vx.shape(), 3, "upsample_bilinear");
  const std::size_t c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  auto ty = upsample_axis(h, factor), tx = upsample_axis(w, factor);
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor<T> out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y) {
      const T fy = static_cast<T>(ty.frac[y]);
      const T* r0 = vx.data() + (ch * h + ty.lo[y]) * w;
      const T* r1 = vx.data() + (ch * h + ty.hi[y]) * w;
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const T fx = static_cast<T>(tx.frac[xx]);
        const T top = (T(1) - fx) * r0[tx.lo[xx]] + fx * r0[tx.hi[xx]];
        const T bot = (T(1) - fx) * r1[tx.lo[xx]] + fx * r1[tx.hi[xx]];
        out[(ch * oh + y) * ow + xx] = value_scale * ((T(1) - fy) * top + fy * bot);
      }
    }
  return g.emit(std::move(out), {x},
                [x, c, h, w, oh, ow, value_scale, ty = std::move(ty), tx = std::move(tx)](Graph<T>& g,
                                                                                          std::size_t self) {
                  const auto& go = g.grad(self);
                  auto& gx = g.grad(x);
                  for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t y = 0; y < oh; ++y) {
                      const T fy = static_cast<T>(ty.frac[y]);
                      T* r0 = gx.data() + (ch * h + ty.lo[y]) * w;
                      T* r1 = gx.data() + (ch * h + ty.hi[y]) * w;
                      for (std::size_t xx = 0; xx < ow; ++xx) {
                        const T fx = static_cast<T>(tx.frac[xx]);
                        const T v = value_scale * go[(ch * oh + y) * ow + xx];
                        r0[tx.lo[xx]] += (T(1) - fy) * (T(1) - fx) * v;
                        r0[tx.hi[xx]] += (T(1) - fy) * fx * v;
                        r1[tx.lo[xx]] += fy * (T(1) - fx) * v;
                        r1[tx.hi[xx]] += fy * fx * v;
                      }
                    }
                });
}

}  // namespace gmflow::ad
