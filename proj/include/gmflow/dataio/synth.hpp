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

// Procedural image pairs with exact ground-truth flow. Frame 1 samples a
// continuous random texture on the pixel grid; frame 2 samples the same
// texture at the inverse warp of each pixel, so I2(x + f(x)) = I1(x).

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "gmflow/flow_field.hpp"
#include "gmflow/random.hpp"
#include "gmflow/supervision.hpp"

namespace gmflow {

enum class Texture { blobs, gradients, checker };
enum class WarpFamily { translation, affine, sinusoidal };

struct SynthSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  Texture texture = Texture::blobs;
  WarpFamily warp = WarpFamily::translation;
  double max_disp = 16.0;  // pixels, bound on |f| over the frame
  double min_disp = 0.0;   // lower bound on the translation component
  std::uint64_t seed = 0;
  /// Forces the translation component (u, v); used for constructed cases.
  std::optional<std::array<double, 2>> translation;

  void validate() const {
    if (height == 0 || width == 0 || height % 8 || width % 8)
      throw Error("synth: image size " + std::to_string(height) + "x" + std::to_string(width) +
                  " must be a positive multiple of 8");
    if (!(max_disp >= 0) || max_disp >= static_cast<double>(std::min(height, width)) / 2)
      throw Error("synth: max displacement " + std::to_string(max_disp) + " must be in [0, min(H, W)/2)");
    if (!(min_disp >= 0) || min_disp > max_disp)
      throw Error("synth: min displacement must lie in [0, max displacement]");
  }
};

template <class T>
struct FlowSample {
  Tensor<T> image1;  // [3, H, W] in [0, 1]
  Tensor<T> image2;
  FlowField<T> flow;  // full resolution, frame 1 -> frame 2
  Mask occlusion;     // [H, W], 1 where x + f(x) leaves the frame
};

namespace synth {

/// Continuous RGB texture over the plane.
class TextureField {
 public:
  TextureField(Texture mode, double extent_h, double extent_w, double margin, Rng& rng) : mode_(mode) {
    const double area = (extent_h + 2 * margin) * (extent_w + 2 * margin);
    const std::size_t count = mode == Texture::gradients ? 0 : static_cast<std::size_t>(area / 24.0);
    blobs_.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      Blob b;
      b.y = rng.uniform(-margin, extent_h + margin);
      b.x = rng.uniform(-margin, extent_w + margin);
      const double sigma = rng.uniform(1.8, 4.0);
      b.inv_two_sigma2 = 1.0 / (2 * sigma * sigma);
      for (auto& a : b.amp) a = rng.uniform(-1.0, 1.0);
      blobs_.push_back(b);
    }
    for (auto& w : waves_) {
      const double freq = rng.uniform(0.02, 0.08) * 2 * std::numbers::pi;
      const double angle = rng.uniform(0.0, 2 * std::numbers::pi);
      w.ky = freq * std::sin(angle);
      w.kx = freq * std::cos(angle);
      w.phase = rng.uniform(0.0, 2 * std::numbers::pi);
      for (auto& a : w.amp) a = rng.uniform(-0.6, 0.6);
    }
    checker_ = rng.uniform(5.0, 9.0);
    checker_angle_ = rng.uniform(0.0, std::numbers::pi / 2);
  }

  std::array<double, 3> operator()(double y, double x) const {
    std::array<double, 3> s{0, 0, 0};
    for (const auto& b : blobs_) {
      const double dy = y - b.y, dx = x - b.x;
      const double d2 = (dy * dy + dx * dx) * b.inv_two_sigma2;
      if (d2 > 12.0) continue;
      const double e = std::exp(-d2);
      for (int c = 0; c < 3; ++c) s[c] += b.amp[c] * e;
    }
    for (const auto& w : waves_) {
      const double v = std::sin(w.ky * y + w.kx * x + w.phase);
      for (int c = 0; c < 3; ++c) s[c] += w.amp[c] * v;
    }
    if (mode_ == Texture::checker) {
      const double ca = std::cos(checker_angle_), sa = std::sin(checker_angle_);
      const double r = (ca * y - sa * x) / checker_, q = (sa * y + ca * x) / checker_;
      // Smoothed square wave keeps the field continuous for bilinear warps.
      const double sq = std::tanh(3 * std::sin(std::numbers::pi * r)) * std::tanh(3 * std::sin(std::numbers::pi * q));
      for (int c = 0; c < 3; ++c) s[c] += 0.8 * sq;
    }
    for (auto& v : s) v = 0.5 + 0.5 * std::tanh(v);
    return s;
  }

 private:
  struct Blob {
    double y, x, inv_two_sigma2;
    std::array<double, 3> amp;
  };
  struct Wave {
    double ky, kx, phase;
    std::array<double, 3> amp;
  };
  Texture mode_;
  std::vector<Blob> blobs_;
  std::array<Wave, 3> waves_{};
  double checker_ = 7.0, checker_angle_ = 0.0;
};

/// Forward displacement field f(y, x) = (u, v) of one warp instance.
class Warp {
 public:
  Warp(const SynthSpec& spec, Rng& rng) : family_(spec.warp), cy_(spec.height / 2.0), cx_(spec.width / 2.0) {
    if (spec.translation) {
      tu_ = (*spec.translation)[0];
      tv_ = (*spec.translation)[1];
    } else {
      const double mag = rng.uniform(spec.min_disp, spec.max_disp);
      const double angle = rng.uniform(0.0, 2 * std::numbers::pi);
      tu_ = mag * std::cos(angle);
      tv_ = mag * std::sin(angle);
    }
    if (family_ != WarpFamily::translation) {
      for (auto& a : lin_) a = rng.uniform(-0.08, 0.08);
    }
    if (family_ == WarpFamily::sinusoidal) {
      amp_u_ = rng.uniform(-1.5, 1.5);
      amp_v_ = rng.uniform(-1.5, 1.5);
      const double wl = rng.uniform(24.0, 48.0);
      const double angle = rng.uniform(0.0, 2 * std::numbers::pi);
      ky_ = 2 * std::numbers::pi / wl * std::sin(angle);
      kx_ = 2 * std::numbers::pi / wl * std::cos(angle);
      phase_ = rng.uniform(0.0, 2 * std::numbers::pi);
    }
    // Shrink the non-translational part until |f| <= max_disp on the frame.
    if (!spec.translation && family_ != WarpFamily::translation) {
      double worst = 0;
      for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x) {
          const auto [u, v] = (*this)(static_cast<double>(y), static_cast<double>(x));
          worst = std::max(worst, std::hypot(u, v));
        }
      if (worst > spec.max_disp && worst > 0) {
        const double s = spec.max_disp / worst;
        tu_ *= s;
        tv_ *= s;
        for (auto& a : lin_) a *= s;
        amp_u_ *= s;
        amp_v_ *= s;
      }
    }
  }

  std::array<double, 2> operator()(double y, double x) const {
    const double dy = y - cy_, dx = x - cx_;
    double u = tu_ + lin_[0] * dx + lin_[1] * dy;
    double v = tv_ + lin_[2] * dx + lin_[3] * dy;
    if (family_ == WarpFamily::sinusoidal) {
      const double s = std::sin(ky_ * y + kx_ * x + phase_);
      u += amp_u_ * s;
      v += amp_v_ * s;
    }
    return {u, v};
  }

  /// Solves p + f(p) = (y, x) for p by fixed-point iteration.
  std::array<double, 2> inverse(double y, double x) const {
    double py = y, px = x;
    for (int it = 0; it < 60; ++it) {
      const auto [u, v] = (*this)(py, px);
      const double ny = y - v, nx = x - u;
      const double step = std::abs(ny - py) + std::abs(nx - px);
      py = ny;
      px = nx;
      if (step < 1e-12) break;
    }
    return {py, px};
  }

 private:
  WarpFamily family_;
  double cy_, cx_;
  double tu_ = 0, tv_ = 0;
  std::array<double, 4> lin_{0, 0, 0, 0};
  double amp_u_ = 0, amp_v_ = 0, ky_ = 0, kx_ = 0, phase_ = 0;
};

}  // namespace synth

template <class T>
FlowSample<T> synth_pair(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t h = spec.height, w = spec.width;
  const double margin = spec.max_disp + 8.0;
  synth::TextureField tex(spec.texture, static_cast<double>(h), static_cast<double>(w), margin, rng);
  synth::Warp warp(spec, rng);

  FlowSample<T> s{Tensor<T>({3, h, w}), Tensor<T>({3, h, w}), FlowField<T>(h, w, FlowScale::full), Mask({h, w})};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      const auto c1 = tex(fy, fx);
      const auto [sy, sx] = warp.inverse(fy, fx);
      const auto c2 = tex(sy, sx);
      for (std::size_t c = 0; c < 3; ++c) {
        s.image1(c, y, x) = static_cast<T>(c1[c]);
        s.image2(c, y, x) = static_cast<T>(c2[c]);
      }
      const auto [u, v] = warp(fy, fx);
      s.flow.u(y, x) = static_cast<T>(u);
      s.flow.v(y, x) = static_cast<T>(v);
      const double ty = fy + static_cast<double>(s.flow.v(y, x)), tx = fx + static_cast<double>(s.flow.u(y, x));
      s.occlusion[y * w + x] =
          (ty < 0 || tx < 0 || ty > static_cast<double>(h - 1) || tx > static_cast<double>(w - 1)) ? 1 : 0;
    }
  return s;
}

}  // namespace gmflow
