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

// Large-context feature extraction: a three-convolution stem down to 1/8
// resolution followed by transformer blocks whose attention is restricted to
// each M x M patch and its eight neighbouring patches.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "gmflow/layers.hpp"
#include "gmflow/params.hpp"

namespace gmflow {

struct PolaConfig {
  std::size_t dim = 32;      // feature dimension d
  std::size_t heads = 4;     // n, with d_k = d / n
  std::size_t patch = 4;     // M
  std::size_t blocks = 2;    // N
  std::size_t stem1 = 64;    // channels after the first stride-2 conv
  std::size_t stem2 = 128;   // channels after the second stride-2 conv
  std::size_t mlp_ratio = 4;
  ad::Activation activation = ad::Activation::relu;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t bias_extent() const { return 4 * patch - 1; }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw Error("feature dim " + std::to_string(dim) + " must be a positive multiple of heads " +
                  std::to_string(heads));
    if (patch == 0) throw Error("patch size must be >= 1");
    if (blocks == 0) throw Error("block count must be >= 1");
    if (stem1 == 0 || stem2 == 0 || mlp_ratio == 0) throw Error("stem widths and mlp ratio must be positive");
  }

  /// Full-size model: d=256, 8 heads, M=7, 6 blocks.
  static PolaConfig full_size() { return {256, 8, 7, 6, 64, 128, 4, ad::Activation::relu}; }
};

/// softmax(Q K^T / sqrt(d_k) + B) V over the keys admitted by `mask`
/// (row-major [N_q, N_k], true = admitted). Q is [N_q, d_k], K and V are
/// [N_k, d_k], B is [N_q, N_k].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& bias,
                    const std::vector<bool>& mask) {
  require_rank(q.shape(), 2, "attention Q");
  require_rank(k.shape(), 2, "attention K");
  require_same_shape(k.shape(), v.shape(), "attention K/V");
  const std::size_t nq = q.dim(0), nk = k.dim(0), dk = q.dim(1);
  if (k.dim(1) != dk) throw Error("attention: Q " + shape_str(q.shape()) + " vs K " + shape_str(k.shape()));
  require_same_shape(bias.shape(), Shape{nq, nk}, "attention bias");
  if (mask.size() != nq * nk) throw Error("attention: mask must have N_q * N_k entries");
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  Tensor<T> out({nq, dk});
  std::vector<T> logits;
  std::vector<std::size_t> keys;
  for (std::size_t i = 0; i < nq; ++i) {
    logits.clear();
    keys.clear();
    for (std::size_t j = 0; j < nk; ++j) {
      if (!mask[i * nk + j]) continue;
      T dot = 0;
      for (std::size_t c = 0; c < dk; ++c) dot += q[i * dk + c] * k[j * dk + c];
      logits.push_back(dot * scale + bias[i * nk + j]);
      keys.push_back(j);
    }
    if (keys.empty()) throw Error("attention: every key is masked for query " + std::to_string(i));
    const auto w = softmax(logits);
    for (std::size_t s = 0; s < keys.size(); ++s)
      for (std::size_t c = 0; c < dk; ++c) out[i * dk + c] += w[s] * v[keys[s] * dk + c];
  }
  return out;
}

/// Key window of the patch containing one query pixel: the 3x3 block of
/// patches around it, clipped to the map.
struct PatchWindow {
  std::size_t row0, row1, col0, col1;  // half-open

  static PatchWindow of(std::size_t y, std::size_t x, std::size_t h, std::size_t w, std::size_t m) {
    const std::size_t py = y / m, px = x / m;
    return {py == 0 ? 0 : (py - 1) * m, std::min(h, (py + 2) * m), px == 0 ? 0 : (px - 1) * m,
            std::min(w, (px + 2) * m)};
  }
  std::size_t size() const { return (row1 - row0) * (col1 - col0); }
};

namespace ad {

/// Multi-head patch-overlapping attention core on already projected q, k, v
/// maps ([d, H, W] each). `table` is [heads, 4M-1, 4M-1], addressed by the
/// pixel offset (key - query). Keys outside the map are excluded from the
/// softmax, which is equivalent to zero padding to a multiple of M with
/// masked padding.
template <class T>
Var patch_attention(Graph<T>& g, Var q, Var k, Var v, Var table, std::size_t heads, std::size_t m) {
  const auto& vq = g.value(q);
  require_rank(vq.shape(), 3, "patch_attention q");
  require_same_shape(vq.shape(), g.value(k).shape(), "patch_attention q/k");
  require_same_shape(vq.shape(), g.value(v).shape(), "patch_attention q/v");
  const std::size_t d = vq.dim(0), h = vq.dim(1), w = vq.dim(2), np = h * w;
  if (heads == 0 || d % heads != 0) throw Error("patch_attention: dim not divisible by heads");
  const std::size_t dk = d / heads, ext = 4 * m - 1;
  require_same_shape(g.value(table).shape(), Shape{heads, ext, ext}, "patch_attention bias table");
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));

  // Pixel-major copies so every per-pixel head vector is contiguous.
  auto to_pixel_major = [&](const Tensor<T>& t) {
    std::vector<T> out(np * d);
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t p = 0; p < np; ++p) out[p * d + c] = t[c * np + p];
    return out;
  };
  const auto qp = to_pixel_major(vq), kp = to_pixel_major(g.value(k)), vp = to_pixel_major(g.value(v));
  const auto& tab = g.value(table);

  std::vector<std::size_t> offsets(np + 1, 0);
  for (std::size_t p = 0; p < np; ++p) offsets[p + 1] = offsets[p] + PatchWindow::of(p / w, p % w, h, w, m).size();
  auto weights = std::make_shared<std::vector<T>>(offsets[np] * heads);

  Tensor<T> out({d, h, w});
  std::vector<T> logits;
  for (std::size_t p = 0; p < np; ++p) {
    const std::size_t y = p / w, x = p % w;
    const auto win = PatchWindow::of(y, x, h, w, m);
    const std::size_t nk = win.size();
    logits.resize(nk);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const T* qv = qp.data() + p * d + hd * dk;
      const T* tb = tab.data() + hd * ext * ext;
      std::size_t s = 0;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t ky = win.row0; ky < win.row1; ++ky)
        for (std::size_t kx = win.col0; kx < win.col1; ++kx, ++s) {
          const T* kv = kp.data() + (ky * w + kx) * d + hd * dk;
          T dot = 0;
          for (std::size_t c = 0; c < dk; ++c) dot += qv[c] * kv[c];
          const std::size_t off = (ky + 2 * m - 1 - y) * ext + (kx + 2 * m - 1 - x);
          logits[s] = dot * scale + tb[off];
          mx = std::max(mx, logits[s]);
        }
      T* a = weights->data() + (offsets[p] * heads) + hd * nk;
      T total = 0;
      for (std::size_t i = 0; i < nk; ++i) total += a[i] = std::exp(logits[i] - mx);
      for (std::size_t i = 0; i < nk; ++i) a[i] /= total;
      s = 0;
      for (std::size_t ky = win.row0; ky < win.row1; ++ky)
        for (std::size_t kx = win.col0; kx < win.col1; ++kx, ++s) {
          const T* vv = vp.data() + (ky * w + kx) * d + hd * dk;
          for (std::size_t c = 0; c < dk; ++c) out[(hd * dk + c) * np + p] += a[s] * vv[c];
        }
    }
  }

  if (!g.recording()) return g.emit(std::move(out), {}, {});
  return g.emit(std::move(out), {q, k, v, table},
                [=, qp = std::move(qp), kp = std::move(kp), vp = std::move(vp),
                 offsets = std::move(offsets)](Graph<T>& g, std::size_t self) {
                  const auto& go = g.grad(self);
                  std::vector<T> dq(np * d, T(0)), dkv(np * d, T(0)), dv(np * d, T(0));
                  Tensor<T>* dtab = g.needs_grad(table) ? &g.grad(table) : nullptr;
                  std::vector<T> dout(dk), da;
                  for (std::size_t p = 0; p < np; ++p) {
                    const std::size_t y = p / w, x = p % w;
                    const auto win = PatchWindow::of(y, x, h, w, m);
                    const std::size_t nk = win.size();
                    da.resize(nk);
                    for (std::size_t hd = 0; hd < heads; ++hd) {
                      const T* a = weights->data() + offsets[p] * heads + hd * nk;
                      for (std::size_t c = 0; c < dk; ++c) dout[c] = go[(hd * dk + c) * np + p];
                      T dot_ada = 0;
                      std::size_t s = 0;
                      for (std::size_t ky = win.row0; ky < win.row1; ++ky)
                        for (std::size_t kx = win.col0; kx < win.col1; ++kx, ++s) {
                          const std::size_t base = (ky * w + kx) * d + hd * dk;
                          T acc = 0;
                          for (std::size_t c = 0; c < dk; ++c) {
                            acc += dout[c] * vp[base + c];
                            dv[base + c] += a[s] * dout[c];
                          }
                          da[s] = acc;
                          dot_ada += a[s] * acc;
                        }
                      s = 0;
                      const std::size_t qbase = p * d + hd * dk;
                      for (std::size_t ky = win.row0; ky < win.row1; ++ky)
                        for (std::size_t kx = win.col0; kx < win.col1; ++kx, ++s) {
                          const T dl = a[s] * (da[s] - dot_ada);
                          if (dtab) (*dtab)[hd * ext * ext + (ky + 2 * m - 1 - y) * ext + (kx + 2 * m - 1 - x)] += dl;
                          const std::size_t base = (ky * w + kx) * d + hd * dk;
                          for (std::size_t c = 0; c < dk; ++c) {
                            dq[qbase + c] += scale * dl * kp[base + c];
                            dkv[base + c] += scale * dl * qp[qbase + c];
                          }
                        }
                    }
                  }
                  auto scatter = [&](Var target, const std::vector<T>& src) {
                    if (!g.needs_grad(target)) return;
                    auto& gt = g.grad(target);
                    for (std::size_t c = 0; c < d; ++c)
                      for (std::size_t p = 0; p < np; ++p) gt[c * np + p] += src[p * d + c];
                  };
                  scatter(q, dq);
                  scatter(k, dkv);
                  scatter(v, dv);
                });
}

}  // namespace ad

/// Full 3M x 3M window attention weights of one query pixel and head, laid
/// out row-major over the window; positions outside the map carry weight 0.
template <class T>
std::vector<T> patch_attention_weights(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& table,
                                       std::size_t heads, std::size_t m, std::size_t y, std::size_t x,
                                       std::size_t head) {
  const std::size_t d = q.dim(0), h = q.dim(1), w = q.dim(2), np = h * w, dk = d / heads, ext = 4 * m - 1;
  const std::size_t py = y / m, px = x / m;
  const long top = (static_cast<long>(py) - 1) * static_cast<long>(m);
  const long left = (static_cast<long>(px) - 1) * static_cast<long>(m);
  const std::size_t side = 3 * m;
  std::vector<T> logits(side * side, -std::numeric_limits<T>::infinity());
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t wy = 0; wy < side; ++wy)
    for (std::size_t wx = 0; wx < side; ++wx) {
      const long ky = top + static_cast<long>(wy), kx = left + static_cast<long>(wx);
      if (ky < 0 || kx < 0 || ky >= static_cast<long>(h) || kx >= static_cast<long>(w)) continue;
      T dot = 0;
      for (std::size_t c = 0; c < dk; ++c)
        dot += q[(head * dk + c) * np + y * w + x] * k[(head * dk + c) * np + static_cast<std::size_t>(ky) * w +
                                                        static_cast<std::size_t>(kx)];
      const auto off = static_cast<std::size_t>((ky + 2 * static_cast<long>(m) - 1 - static_cast<long>(y)) *
                                                    static_cast<long>(ext) +
                                                (kx + 2 * static_cast<long>(m) - 1 - static_cast<long>(x)));
      logits[wy * side + wx] = dot / std::sqrt(static_cast<T>(dk)) + table[head * ext * ext + off];
      mx = std::max(mx, logits[wy * side + wx]);
    }
  std::vector<T> out(side * side, T(0));
  T total = 0;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (std::isfinite(logits[i])) total += out[i] = std::exp(logits[i] - mx);
  for (auto& v : out) v /= total;
  return out;
}

namespace features {

inline std::string block_prefix(std::size_t i) { return "features.block" + std::to_string(i) + "."; }

template <class T>
void add_attention_params(ParamStore<T>& store, const std::string& prefix, const PolaConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.dim;
  for (const char* proj : {"query", "key", "value", "out"}) {
    store.add_uniform(prefix + proj + ".weight", {d, d}, d, rng);
    store.add_constant(prefix + proj + ".bias", {d}, T(0));
  }
  store.add_constant(prefix + "rel_bias", {cfg.heads, cfg.bias_extent(), cfg.bias_extent()}, T(0));
}

template <class T>
void add_params(ParamStore<T>& store, const PolaConfig& cfg, Rng& rng) {
  cfg.validate();
  store.add_uniform("features.conv1.weight", {cfg.stem1, 3, 7, 7}, 3 * 49, rng);
  store.add_constant("features.conv1.bias", {cfg.stem1}, T(0));
  store.add_uniform("features.conv2.weight", {cfg.stem2, cfg.stem1, 3, 3}, cfg.stem1 * 9, rng);
  store.add_constant("features.conv2.bias", {cfg.stem2}, T(0));
  store.add_uniform("features.conv3.weight", {cfg.dim, cfg.stem2, 3, 3}, cfg.stem2 * 9, rng);
  store.add_constant("features.conv3.bias", {cfg.dim}, T(0));
  const std::size_t d = cfg.dim, hidden = cfg.mlp_ratio * cfg.dim;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const auto pre = block_prefix(b);
    store.add_constant(pre + "norm1.gain", {d}, T(1));
    store.add_constant(pre + "norm1.bias", {d}, T(0));
    add_attention_params(store, pre + "attn.", cfg, rng);
    store.add_constant(pre + "norm2.gain", {d}, T(1));
    store.add_constant(pre + "norm2.bias", {d}, T(0));
    store.add_uniform(pre + "mlp.fc1.weight", {hidden, d}, d, rng);
    store.add_constant(pre + "mlp.fc1.bias", {hidden}, T(0));
    store.add_uniform(pre + "mlp.fc2.weight", {d, hidden}, hidden, rng);
    store.add_constant(pre + "mlp.fc2.bias", {d}, T(0));
  }
}

/// Conv(3,c1,7,2)-act, Conv(c1,c2,3,2)-act, Conv(c2,d,3,2)-act.
template <class T>
Var extract_initial(Graph<T>& g, Var image, const ParamStore<T>& store, const PolaConfig& cfg) {
  const auto& s = g.value(image).shape();
  require_rank(s, 3, "image");
  if (s[0] != 3) throw Error("image must have 3 channels, got " + shape_str(s));
  if (s[1] % 8 != 0 || s[2] % 8 != 0 || s[1] == 0 || s[2] == 0)
    throw Error("image extents " + shape_str(s) + " must be positive multiples of 8; pad the input first");
  auto conv = [&](Var x, const char* name, std::size_t k) {
    const std::string base = std::string("features.") + name;
    return ad::activate(g,
                        ad::conv2d(g, x, g.param(store, base + ".weight"), g.param(store, base + ".bias"), 2, k / 2),
                        cfg.activation);
  };
  return conv(conv(conv(image, "conv1", 7), "conv2", 3), "conv3", 3);
}

/// Multi-head patch-overlapping attention with its input and output projections.
template <class T>
Var pola(Graph<T>& g, Var x, const ParamStore<T>& store, const std::string& prefix, const PolaConfig& cfg) {
  auto proj = [&](Var in, const char* name) {
    return ad::linear_channels(g, in, g.param(store, prefix + name + ".weight"), g.param(store, prefix + name + ".bias"));
  };
  Var q = proj(x, "query"), k = proj(x, "key"), v = proj(x, "value");
  Var attn = ad::patch_attention(g, q, k, v, g.param(store, prefix + "rel_bias"), cfg.heads, cfg.patch);
  return proj(attn, "out");
}

/// Pre-norm residual block: x' = x + POLA(LN(x)); out = x' + MLP(LN(x')).
template <class T>
Var transformer_block(Graph<T>& g, Var x, const ParamStore<T>& store, std::size_t index, const PolaConfig& cfg) {
  const auto pre = block_prefix(index);
  const auto& s = g.value(x).shape();
  require_rank(s, 3, "transformer_block input");
  if (s[0] != cfg.dim) throw Error("transformer_block: expected " + std::to_string(cfg.dim) + " channels, got " + shape_str(s));
  auto p = [&](const std::string& n) { return g.param(store, pre + n); };
  Var n1 = ad::layer_norm_channels(g, x, p("norm1.gain"), p("norm1.bias"));
  Var mid = ad::add(g, x, pola(g, n1, store, pre + "attn.", cfg));
  Var n2 = ad::layer_norm_channels(g, mid, p("norm2.gain"), p("norm2.bias"));
  Var hidden = ad::activate(g, ad::linear_channels(g, n2, p("mlp.fc1.weight"), p("mlp.fc1.bias")), cfg.activation);
  return ad::add(g, mid, ad::linear_channels(g, hidden, p("mlp.fc2.weight"), p("mlp.fc2.bias")));
}

template <class T>
Var extract_context(Graph<T>& g, Var image, const ParamStore<T>& store, const PolaConfig& cfg) {
  Var x = extract_initial(g, image, store, cfg);
  for (std::size_t b = 0; b < cfg.blocks; ++b) x = transformer_block(g, x, store, b, cfg);
  return x;
}

/// Inference-only convenience: image [3, H, W] in [0, 1] -> [d, H/8, W/8].
template <class T>
Tensor<T> extract_context(const Tensor<T>& image, const ParamStore<T>& store, const PolaConfig& cfg) {
  Graph<T> g(false);
  return g.value(extract_context(g, g.constant(image), store, cfg));
}

}  // namespace features
}  // namespace gmflow
