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

// Middlebury .flo: "PIEH", int32 width, int32 height, then interleaved
// (u, v) float32 in row-major pixel order. All little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "gmflow/flow_field.hpp"

namespace gmflow {

inline constexpr char kFloMagic[4] = {'P', 'I', 'E', 'H'};
inline constexpr std::int64_t kFloMaxExtent = 100000;

namespace detail {

static_assert(std::endian::native == std::endian::little, ".flo I/O assumes a little-endian host");

inline void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

}  // namespace detail

template <class T>
void write_flo(const FlowField<T>& flow, const std::string& path) {
  flow.require_scale(FlowScale::full, "write_flo");
  const std::size_t h = flow.height(), w = flow.width();
  if (static_cast<std::int64_t>(h) > kFloMaxExtent || static_cast<std::int64_t>(w) > kFloMaxExtent)
    throw Error("write_flo: extents " + shape_str(flow.data.shape()) + " exceed the format limit");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("write_flo: cannot open '" + path + "' for writing");
  const std::int32_t dims[2] = {static_cast<std::int32_t>(w), static_cast<std::int32_t>(h)};
  detail::write_bytes(out, kFloMagic, 4);
  detail::write_bytes(out, dims, sizeof dims);
  std::vector<float> row(2 * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      row[2 * x] = static_cast<float>(flow.u(y, x));
      row[2 * x + 1] = static_cast<float>(flow.v(y, x));
    }
    detail::write_bytes(out, row.data(), row.size() * sizeof(float));
  }
  if (!out) throw Error("write_flo: write failed for '" + path + "'");
}

template <class T = float>
FlowField<T> read_flo(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_flo: cannot open '" + path + "'");
  char magic[4];
  std::int32_t dims[2];
  if (!in.read(magic, 4)) throw Error("read_flo: '" + path + "' is truncated (no header)");
  if (std::memcmp(magic, kFloMagic, 4) != 0) throw Error("read_flo: '" + path + "' has bad magic, expected PIEH");
  if (!in.read(reinterpret_cast<char*>(dims), sizeof dims)) throw Error("read_flo: '" + path + "' is truncated (no extents)");
  const std::int64_t w = dims[0], h = dims[1];
  if (w <= 0 || h <= 0 || w > kFloMaxExtent || h > kFloMaxExtent)
    throw Error("read_flo: '" + path + "' has implausible extents " + std::to_string(w) + "x" + std::to_string(h));
  FlowField<T> flow(static_cast<std::size_t>(h), static_cast<std::size_t>(w), FlowScale::full);
  std::vector<float> row(2 * static_cast<std::size_t>(w));
  for (std::size_t y = 0; y < flow.height(); ++y) {
    if (!in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float))))
      throw Error("read_flo: '" + path + "' is truncated at row " + std::to_string(y) + " of " + std::to_string(h));
    for (std::size_t x = 0; x < flow.width(); ++x) {
      flow.u(y, x) = static_cast<T>(row[2 * x]);
      flow.v(y, x) = static_cast<T>(row[2 * x + 1]);
    }
  }
  return flow;
}

}  // namespace gmflow
