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

#include <string>

#include "gmflow/tensor.hpp"

namespace gmflow {

/// Which pixel grid a flow field lives on. Displacements are always expressed
/// in pixels of that grid.
enum class FlowScale { eighth, full };

inline const char* to_string(FlowScale s) { return s == FlowScale::eighth ? "1/8" : "full"; }

/// Two-channel displacement field [2, H, W]: channel 0 is the horizontal
/// (column) displacement u, channel 1 the vertical (row) displacement v.
template <class T>
struct FlowField {
  Tensor<T> data;
  FlowScale scale = FlowScale::full;

  FlowField() = default;
  FlowField(std::size_t h, std::size_t w, FlowScale s) : data({2, h, w}), scale(s) {}
  FlowField(Tensor<T> t, FlowScale s) : data(std::move(t)), scale(s) {
    require_rank(data.shape(), 3, "flow field");
    if (data.dim(0) != 2) throw Error("flow field must have 2 channels, got " + shape_str(data.shape()));
  }

  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
  T& u(std::size_t y, std::size_t x) { return data(0, y, x); }
  T& v(std::size_t y, std::size_t x) { return data(1, y, x); }
  T u(std::size_t y, std::size_t x) const { return data(0, y, x); }
  T v(std::size_t y, std::size_t x) const { return data(1, y, x); }

  void require_scale(FlowScale expected, const char* what) const {
    if (scale != expected)
      throw Error(std::string(what) + ": expected a " + to_string(expected) + "-resolution flow, got " +
                  to_string(scale));
  }
};

}  // namespace gmflow
