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

// On-disk sample layout, one group of files per pair in a directory:
//   NNNN_img1.png  NNNN_img2.png  8-bit RGB frames
//   NNNN_flow.flo                 full-resolution ground truth
//   NNNN_occ.png                  8-bit gray, nonzero = occluded (optional)

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "gmflow/dataio/flo.hpp"
#include "gmflow/dataio/image_io.hpp"
#include "gmflow/dataio/synth.hpp"

namespace gmflow {

inline std::string sample_stem(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

template <class T>
void write_sample(const std::filesystem::path& dir, std::size_t index, const FlowSample<T>& s) {
  const std::string stem = (dir / sample_stem(index)).string();
  write_png(to_image(s.image1), stem + "_img1.png");
  write_png(to_image(s.image2), stem + "_img2.png");
  write_flo(s.flow, stem + "_flow.flo");
  Image8 occ(s.occlusion.dim(0), s.occlusion.dim(1), 1);
  for (std::size_t i = 0; i < s.occlusion.size(); ++i) occ.pixels[i] = s.occlusion[i] ? 255 : 0;
  write_png(occ, stem + "_occ.png");
}

struct NamedSample {
  std::string name;
  FlowSample<float> sample;
};

/// Loads every `*_img1.png` group in `dir`, sorted by name.
inline std::vector<NamedSample> load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error("dataset directory '" + dir.string() + "' does not exist");
  const std::string suffix = "_img1.png";
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string f = e.path().filename().string();
    if (f.size() > suffix.size() && f.compare(f.size() - suffix.size(), suffix.size(), suffix) == 0)
      stems.push_back(f.substr(0, f.size() - suffix.size()));
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw Error("dataset directory '" + dir.string() + "' contains no *_img1.png files");
  std::vector<NamedSample> out;
  for (const auto& stem : stems) {
    const std::string base = (dir / stem).string();
    NamedSample ns{stem, {}};
    auto& s = ns.sample;
    s.image1 = to_tensor<float>(read_png(base + "_img1.png"));
    s.image2 = to_tensor<float>(read_png(base + "_img2.png"));
    require_same_shape(s.image1.shape(), s.image2.shape(), ("frames of " + base).c_str());
    s.flow = read_flo<float>(base + "_flow.flo");
    if (s.flow.height() != s.image1.dim(1) || s.flow.width() != s.image1.dim(2))
      throw Error("'" + base + "_flow.flo' does not match the frame size");
    s.occlusion = Mask({s.flow.height(), s.flow.width()});
    if (fs::exists(base + "_occ.png")) {
      const auto occ = read_png(base + "_occ.png", 1);
      if (occ.height != s.flow.height() || occ.width != s.flow.width())
        throw Error("'" + base + "_occ.png' does not match the frame size");
      for (std::size_t i = 0; i < occ.pixels.size(); ++i) s.occlusion[i] = occ.pixels[i] ? 1 : 0;
    }
    out.push_back(std::move(ns));
  }
  return out;
}

}  // namespace gmflow
