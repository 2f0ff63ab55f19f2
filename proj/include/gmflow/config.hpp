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

// Run configuration: line-oriented `key = value` text, `#` starts a comment.
// Every key has a default; unknown keys are rejected. to_text() writes the
// canonical form, which parses back to an identical configuration.

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gmflow/dataio/synth.hpp"
#include "gmflow/gradcheck.hpp"
#include "gmflow/model.hpp"
#include "gmflow/train.hpp"

namespace gmflow {

struct RunConfig {
  ModelConfig model = default_model();
  LossConfig loss;
  TrainConfig train = default_train();
  SynthSpec data;
  std::size_t data_count = 10;
  std::size_t gradcheck_size = 32;  // image side of the gradient-check pair
  double gradcheck_perturb = 0.05;  // uniform jitter added to every parameter
  GradCheckOptions gradcheck;

  static ModelConfig default_model() {
    ModelConfig m;
    m.features.dim = 32;
    m.features.heads = 2;
    m.features.patch = 2;
    m.features.blocks = 1;
    m.features.stem1 = 16;
    m.features.stem2 = 32;
    m.refiner.hidden = 32;
    m.refiner.motion = 32;
    m.refiner.iters = 4;
    return m;
  }
  static TrainConfig default_train() {
    TrainConfig t;
    t.steps = 2000;
    return t;
  }

  /// Loss iteration count follows the refiner.
  LossConfig loss_config() const {
    LossConfig l = loss;
    l.iters = model.refiner.iters;
    return l;
  }

  void validate() const {
    model.validate();
    loss_config().validate();
    train.validate();
    data.validate();
    if (data_count == 0) throw Error("config: data.count must be positive");
    if (gradcheck_size == 0 || gradcheck_size % 8) throw Error("config: gradcheck.size must be a positive multiple of 8");
    if (!(gradcheck.eps > 0 && gradcheck.tol > 0)) throw Error("config: gradcheck eps and tol must be positive");
  }
};

namespace config {

struct Key {
  std::string name;
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

template <class N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || p != end) throw Error("config: '" + key + "' expects a number, got '" + text + "'");
  return v;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class E>
struct EnumNames {
  std::vector<std::pair<E, std::string>> names;

  E parse(const std::string& key, const std::string& text) const {
    std::string options;
    for (const auto& [e, n] : names) {
      if (n == text) return e;
      options += (options.empty() ? "" : "|") + n;
    }
    throw Error("config: '" + key + "' expects one of " + options + ", got '" + text + "'");
  }
  std::string name(E e) const {
    for (const auto& [v, n] : names)
      if (v == e) return n;
    return "?";
  }
};

inline const EnumNames<ad::Activation> activations{{{ad::Activation::relu, "relu"}, {ad::Activation::silu, "silu"}}};
inline const EnumNames<FlowInit> inits{{{FlowInit::coarse, "coarse"}, {FlowInit::zero, "zero"}}};
inline const EnumNames<LookupBall> balls{{{LookupBall::l1, "l1"}, {LookupBall::linf, "linf"}}};
inline const EnumNames<Texture> textures{
    {{Texture::blobs, "blobs"}, {Texture::gradients, "gradients"}, {Texture::checker, "checker"}}};
inline const EnumNames<WarpFamily> warps{
    {{WarpFamily::translation, "translation"}, {WarpFamily::affine, "affine"}, {WarpFamily::sinusoidal, "sinusoidal"}}};

}  // namespace detail

#define GMFLOW_SIZE_KEY(key, doc, field)                                                                    \
  Key {                                                                                                     \
    key, doc, [](RunConfig& c, const std::string& v) { c.field = detail::parse_number<std::size_t>(key, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                                          \
  }
#define GMFLOW_REAL_KEY(key, doc, field)                                                               \
  Key {                                                                                                \
    key, doc, [](RunConfig& c, const std::string& v) { c.field = detail::parse_number<double>(key, v); }, \
        [](const RunConfig& c) { return detail::fmt(c.field); }                                        \
  }
#define GMFLOW_ENUM_KEY(key, doc, field, table)                                               \
  Key {                                                                                       \
    key, doc, [](RunConfig& c, const std::string& v) { c.field = detail::table.parse(key, v); }, \
        [](const RunConfig& c) { return detail::table.name(c.field); }                        \
  }

/// Every recognised key, in canonical order.
inline const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      GMFLOW_SIZE_KEY("model.dim", "feature dimension d", model.features.dim),
      GMFLOW_SIZE_KEY("model.heads", "attention heads n", model.features.heads),
      GMFLOW_SIZE_KEY("model.patch", "attention patch size M", model.features.patch),
      GMFLOW_SIZE_KEY("model.blocks", "transformer blocks N", model.features.blocks),
      GMFLOW_SIZE_KEY("model.stem1", "channels of the first stem conv", model.features.stem1),
      GMFLOW_SIZE_KEY("model.stem2", "channels of the second stem conv", model.features.stem2),
      GMFLOW_SIZE_KEY("model.mlp_ratio", "MLP hidden width / d", model.features.mlp_ratio),
      GMFLOW_ENUM_KEY("model.activation", "relu|silu in the transformer MLP", model.features.activation, activations),
      GMFLOW_REAL_KEY("model.temperature", "dual-softmax temperature", model.temperature),
      GMFLOW_ENUM_KEY("model.init", "coarse|zero, refiner initial flow", model.init, inits),
      GMFLOW_SIZE_KEY("refiner.iters", "refinement iterations T", model.refiner.iters),
      Key{"refiner.radius", "lookup radius r",
          [](RunConfig& c, const std::string& v) { c.model.refiner.lookup.radius = detail::parse_number<int>("refiner.radius", v); },
          [](const RunConfig& c) { return std::to_string(c.model.refiner.lookup.radius); }},
      GMFLOW_ENUM_KEY("refiner.ball", "l1|linf lookup neighbourhood", model.refiner.lookup.ball, balls),
      GMFLOW_SIZE_KEY("refiner.hidden", "GRU hidden channels", model.refiner.hidden),
      GMFLOW_SIZE_KEY("refiner.motion", "motion-encoder channels", model.refiner.motion),
      GMFLOW_ENUM_KEY("refiner.activation", "relu|silu in the motion encoder", model.refiner.activation, activations),
      GMFLOW_REAL_KEY("loss.lambda", "matching-loss weight", loss.lambda),
      GMFLOW_REAL_KEY("loss.gamma", "sequence-loss decay", loss.gamma),
      GMFLOW_REAL_KEY("train.lr", "Adam learning rate", train.lr),
      GMFLOW_SIZE_KEY("train.steps", "optimizer steps", train.steps),
      GMFLOW_REAL_KEY("train.clip", "global gradient-norm clip", train.clip),
      GMFLOW_SIZE_KEY("train.seed", "initialization and batching seed", train.seed),
      GMFLOW_SIZE_KEY("train.batch", "pairs per step", train.batch),
      GMFLOW_SIZE_KEY("train.warmup", "linear warmup steps", train.warmup),
      GMFLOW_SIZE_KEY("train.log_every", "steps per trace row", train.log_every),
      GMFLOW_SIZE_KEY("data.height", "image height", data.height),
      GMFLOW_SIZE_KEY("data.width", "image width", data.width),
      GMFLOW_ENUM_KEY("data.texture", "blobs|gradients|checker", data.texture, textures),
      GMFLOW_ENUM_KEY("data.warp", "translation|affine|sinusoidal", data.warp, warps),
      GMFLOW_REAL_KEY("data.max_disp", "largest displacement, pixels", data.max_disp),
      GMFLOW_REAL_KEY("data.min_disp", "smallest translation, pixels", data.min_disp),
      GMFLOW_SIZE_KEY("data.seed", "seed of the first pair", data.seed),
      GMFLOW_SIZE_KEY("data.count", "pairs written by synth", data_count),
      GMFLOW_SIZE_KEY("gradcheck.size", "image side of the checked pair", gradcheck_size),
      GMFLOW_REAL_KEY("gradcheck.perturb", "jitter added to parameters", gradcheck_perturb),
      GMFLOW_REAL_KEY("gradcheck.eps", "central-difference step", gradcheck.eps),
      GMFLOW_REAL_KEY("gradcheck.tol", "relative-error tolerance", gradcheck.tol),
  };
  return k;
}

#undef GMFLOW_SIZE_KEY
#undef GMFLOW_REAL_KEY
#undef GMFLOW_ENUM_KEY

inline const Key& find_key(const std::string& name) {
  for (const auto& k : keys())
    if (k.name == name) return k;
  throw Error("config: unknown key '" + name + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

/// Applies `key = value` (or `key=value`) to `cfg`.
inline void assign(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error("config: expected 'key = value', got '" + assignment + "'");
  const std::string key = trim(assignment.substr(0, eq)), value = trim(assignment.substr(eq + 1));
  if (value.empty()) throw Error("config: '" + key + "' has no value");
  find_key(key).set(cfg, value);
}

/// Parses on top of the defaults; `origin` names the source in errors.
inline RunConfig parse(const std::string& text, const std::string& origin = "<config>") {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      assign(cfg, line);
    } catch (const Error& e) {
      throw Error(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

inline std::string to_text(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : keys()) os << k.name << " = " << k.get(cfg) << "  # " << k.doc << '\n';
  return os.str();
}

}  // namespace config
}  // namespace gmflow
