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

// Pure numeric kernels shared by the inference path and the differentiable
// graph ops in layers.hpp.

#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gmflow/tensor.hpp"

namespace gmflow {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t in_c, in_h, in_w;
  std::size_t out_c, k, stride, pad;
  std::size_t out_h, out_w;

  static ConvGeometry make(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t pad) {
    require_rank(input, 3, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    if (kernel[1] != input[0] || kernel[2] != kernel[3])
      throw Error("conv2d: kernel " + shape_str(kernel) + " incompatible with input " + shape_str(input));
    if (stride == 0) throw Error("conv2d: stride must be positive");
    ConvGeometry g{input[0], input[1], input[2], kernel[0], kernel[2], stride, pad, 0, 0};
    const auto span_h = static_cast<long>(g.in_h + 2 * pad) - static_cast<long>(g.k);
    const auto span_w = static_cast<long>(g.in_w + 2 * pad) - static_cast<long>(g.k);
    if (span_h < 0 || span_w < 0)
      throw Error("conv2d: kernel " + shape_str(kernel) + " larger than padded input " + shape_str(input));
    g.out_h = static_cast<std::size_t>(span_h) / stride + 1;
    g.out_w = static_cast<std::size_t>(span_w) / stride + 1;
    return g;
  }
  bool pointwise() const noexcept { return k == 1 && stride == 1 && pad == 0; }
  std::size_t patch() const noexcept { return in_c * k * k; }
  std::size_t pixels() const noexcept { return out_h * out_w; }
};

namespace detail {

/// Sequential sum, independent of buffer alignment.
template <class T>
T row_sum(const T* p, std::size_t n) {
  return std::accumulate(p, p + n, T(0));
}

template <class T>
void im2col(const ConvGeometry& g, const T* in, T* cols) {
  const std::size_t np = g.pixels();
  for (std::size_t c = 0; c < g.in_c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * np;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = in + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.in_w)) ? T(0) : src[ix];
          }
        }
      }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* cols, T* in_grad) {
  const std::size_t np = g.pixels();
  for (std::size_t c = 0; c < g.in_c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * np;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          T* dst = in_grad + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.in_w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// Zero-padded 2D cross-correlation (no kernel flip). Input [C_in, H, W],
/// kernel [C_out, C_in, k, k], optional bias [C_out].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t padding,
                 const Tensor<T>* bias = nullptr) {
  const auto g = ConvGeometry::make(input.shape(), kernel.shape(), stride, padding);
  if (bias && bias->size() != g.out_c)
    throw Error("conv2d: bias " + shape_str(bias->shape()) + " does not match kernel " + shape_str(kernel.shape()));
  Tensor<T> out({g.out_c, g.out_h, g.out_w});
  MatMap<T> o(out.data(), g.out_c, g.pixels());
  ConstMatMap<T> w(kernel.data(), g.out_c, g.patch());
  if (g.pointwise()) {
    o.noalias() = w * ConstMatMap<T>(input.data(), g.in_c, g.pixels());
  } else {
    std::vector<T> cols(g.patch() * g.pixels());
    detail::im2col(g, input.data(), cols.data());
    o.noalias() = w * ConstMatMap<T>(cols.data(), g.patch(), g.pixels());
  }
  if (bias)
    for (std::size_t c = 0; c < g.out_c; ++c) o.row(c).array() += (*bias)[c];
  return out;
}

/// Numerically stable softmax (max subtraction).
template <class T>
std::vector<T> softmax(std::span<const T> logits) {
  if (logits.empty()) throw Error("softmax: empty input");
  const T m = *std::max_element(logits.begin(), logits.end());
  std::vector<T> out(logits.size());
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += out[i] = std::exp(logits[i] - m);
  for (auto& v : out) v /= sum;
  return out;
}

template <class T>
std::vector<T> softmax(const std::vector<T>& logits) {
  return softmax(std::span<const T>(logits));
}

template <class T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, T eps = T(1e-5)) {
  if (x.size() != gain.size() || x.size() != bias.size())
    throw Error("layer_norm: length mismatch (x " + std::to_string(x.size()) + ", gain " +
                std::to_string(gain.size()) + ", bias " + std::to_string(bias.size()) + ")");
  if (x.empty()) throw Error("layer_norm: empty input");
  const T n = static_cast<T>(x.size());
  T mean = 0;
  for (T v : x) mean += v;
  mean /= n;
  T var = 0;
  for (T v : x) var += (v - mean) * (v - mean);
  var /= n;
  const T inv = T(1) / std::sqrt(var + eps);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
  return out;
}

/// y = W x + b with W of shape [out, in].
template <class T>
std::vector<T> linear(std::span<const T> x, const Tensor<T>& weight, std::span<const T> bias) {
  require_rank(weight.shape(), 2, "linear weight");
  if (weight.dim(1) != x.size() || weight.dim(0) != bias.size())
    throw Error("linear: weight " + shape_str(weight.shape()) + " incompatible with x[" + std::to_string(x.size()) +
                "] and b[" + std::to_string(bias.size()) + "]");
  std::vector<T> y(bias.begin(), bias.end());
  for (std::size_t o = 0; o < weight.dim(0); ++o)
    for (std::size_t i = 0; i < x.size(); ++i) y[o] += weight[o * x.size() + i] * x[i];
  return y;
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}
template <class T>
T relu(T x) {
  return x > T(0) ? x : T(0);
}
template <class T>
T silu(T x) {
  return x * sigmoid(x);
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& x, F&& f) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

/// One term of a bilinear interpolation: flat index into the plane and weight.
template <class T>
struct BilinearTap {
  std::size_t index;
  T weight;
};

/// Bilinear taps for sampling an H x W plane at (row, col) using the cell whose
/// top-left corner is (y0, x0). Neighbours outside the plane are treated as
/// zeros. Returns the number of valid taps written.
template <class T>
int bilinear_taps_in_cell(std::size_t h, std::size_t w, T row, T col, long y0, long x0,
                          std::array<BilinearTap<T>, 4>& taps) {
  const T ay = row - static_cast<T>(y0), ax = col - static_cast<T>(x0);
  int n = 0;
  const long ys[2] = {y0, y0 + 1};
  const long xs[2] = {x0, x0 + 1};
  const T wy[2] = {T(1) - ay, ay};
  const T wx[2] = {T(1) - ax, ax};
  for (int a = 0; a < 2; ++a) {
    if (ys[a] < 0 || ys[a] >= static_cast<long>(h)) continue;
    for (int b = 0; b < 2; ++b) {
      if (xs[b] < 0 || xs[b] >= static_cast<long>(w)) continue;
      taps[n++] = {static_cast<std::size_t>(ys[a]) * w + static_cast<std::size_t>(xs[b]), wy[a] * wx[b]};
    }
  }
  return n;
}

/// Bilinear taps at (row, col) in the cell containing it; any point more than
/// one cell outside the plane samples exactly 0.
template <class T>
int bilinear_taps(std::size_t h, std::size_t w, T row, T col, std::array<BilinearTap<T>, 4>& taps) {
  return bilinear_taps_in_cell(h, w, row, col, static_cast<long>(std::floor(row)), static_cast<long>(std::floor(col)),
                               taps);
}

template <class T>
T bilinear_at(const T* plane, std::size_t h, std::size_t w, T row, T col) {
  std::array<BilinearTap<T>, 4> taps;
  const int n = bilinear_taps(h, w, row, col, taps);
  T v = 0;
  for (int i = 0; i < n; ++i) v += taps[i].weight * plane[taps[i].index];
  return v;
}

/// Samples every channel of a [C, H, W] grid at each (row, col); returns [N, C].
template <class T>
Tensor<T> bilinear_sample(const Tensor<T>& grid, std::span<const std::pair<T, T>> coords) {
  require_rank(grid.shape(), 3, "bilinear_sample grid");
  if (grid.empty()) throw Error("bilinear_sample: empty grid");
  const std::size_t c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
  Tensor<T> out({coords.size(), c});
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      out[i * c + ch] = bilinear_at(grid.data() + ch * h * w, h, w, coords[i].first, coords[i].second);
  return out;
}

}  // namespace gmflow
