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

// End-point-error metrics with displacement bins keyed on |gt|:
// s0-10 = [0, 10), s10-40 = [10, 40), s40+ = [40, inf). Fl-all counts pixels
// with EPE > 3 px and EPE > 5% of |gt|.

#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gmflow/flow_field.hpp"
#include "gmflow/supervision.hpp"

namespace gmflow {

/// Sum with O(log n) error growth and a fixed association order.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

struct DisplacementBin {
  std::string label;
  double lo = 0, hi = std::numeric_limits<double>::infinity();

  bool contains(double magnitude) const { return magnitude >= lo && magnitude < hi; }
};

inline const std::array<DisplacementBin, 3>& standard_bins() {
  static const std::array<DisplacementBin, 3> bins{{{"s0-10", 0, 10},
                                                    {"s10-40", 10, 40},
                                                    {"s40+", 40, std::numeric_limits<double>::infinity()}}};
  return bins;
}

inline const DisplacementBin& find_bin(const std::string& label) {
  for (const auto& b : standard_bins())
    if (b.label == label) return b;
  throw Error("unknown displacement bin '" + label + "' (expected s0-10, s10-40 or s40+)");
}

struct EpeRow {
  std::string label;
  std::size_t count = 0;
  double aepe = 0;    // 0 when count == 0
  double fl_all = 0;  // percent
};

struct EpeReport {
  std::array<EpeRow, 3> bins;
  EpeRow all;

  double aepe() const { return all.aepe; }
  double fl_all() const { return all.fl_all; }
};

namespace detail {

inline EpeRow epe_row(std::string label, const std::vector<double>& epe, const std::vector<double>& outlier) {
  EpeRow r{std::move(label), epe.size(), 0, 0};
  if (!epe.empty()) {
    r.aepe = pairwise_sum(epe) / static_cast<double>(epe.size());
    r.fl_all = 100.0 * pairwise_sum(outlier) / static_cast<double>(epe.size());
  }
  return r;
}

}  // namespace detail

/// `valid` is an [H, W] mask (nonzero = evaluated); an empty mask means all pixels.
template <class T>
EpeReport epe_metrics(const FlowField<T>& pred, const FlowField<T>& gt, const Mask& valid = Mask{}) {
  require_same_shape(pred.data.shape(), gt.data.shape(), "epe_metrics");
  if (pred.scale != gt.scale) throw Error("epe_metrics: prediction and ground truth are on different grids");
  const std::size_t h = gt.height(), w = gt.width();
  if (valid.size() != 0) require_same_shape(valid.shape(), Shape{h, w}, "epe_metrics valid mask");
  const auto& bins = standard_bins();
  std::array<std::vector<double>, 3> epe, out;
  std::vector<double> epe_all, out_all;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (valid.size() != 0 && !valid[y * w + x]) continue;
      const double gu = gt.u(y, x), gv = gt.v(y, x);
      const double e = std::hypot(static_cast<double>(pred.u(y, x)) - gu, static_cast<double>(pred.v(y, x)) - gv);
      const double mag = std::hypot(gu, gv);
      const double o = (e > 3.0 && e > 0.05 * mag) ? 1.0 : 0.0;
      epe_all.push_back(e);
      out_all.push_back(o);
      for (std::size_t b = 0; b < bins.size(); ++b)
        if (bins[b].contains(mag)) {
          epe[b].push_back(e);
          out[b].push_back(o);
        }
    }
  if (epe_all.empty()) throw Error("epe_metrics: no valid pixels");
  EpeReport r;
  for (std::size_t b = 0; b < bins.size(); ++b) r.bins[b] = detail::epe_row(bins[b].label, epe[b], out[b]);
  r.all = detail::epe_row("All", epe_all, out_all);
  return r;
}

/// Pools per-pixel statistics of several reports (weighted by pixel counts).
inline EpeReport merge_reports(const std::vector<EpeReport>& reports) {
  if (reports.empty()) throw Error("merge_reports: nothing to merge");
  auto merge = [](std::vector<const EpeRow*> rows) {
    EpeRow r{rows.front()->label, 0, 0, 0};
    std::vector<double> e, o;
    for (const auto* row : rows) {
      r.count += row->count;
      e.push_back(row->aepe * static_cast<double>(row->count));
      o.push_back(row->fl_all * static_cast<double>(row->count));
    }
    if (r.count) {
      r.aepe = pairwise_sum(e) / static_cast<double>(r.count);
      r.fl_all = pairwise_sum(o) / static_cast<double>(r.count);
    }
    return r;
  };
  EpeReport out;
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<const EpeRow*> rows;
    for (const auto& rep : reports) rows.push_back(&rep.bins[b]);
    out.bins[b] = merge(rows);
  }
  std::vector<const EpeRow*> rows;
  for (const auto& rep : reports) rows.push_back(&rep.all);
  out.all = merge(rows);
  return out;
}

/// Tab-separated table, one header line, rows s0-10 / s10-40 / s40+ / All.
inline std::string format_report(const EpeReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "region\tpixels\tAEPE\tFl-all\n";
  auto row = [&](const EpeRow& e) {
    os << e.label << '\t' << e.count << '\t';
    if (e.count)
      os << e.aepe << '\t' << e.fl_all << '\n';
    else
      os << "-\t-\n";
  };
  for (const auto& b : r.bins) row(b);
  row(r.all);
  return os.str();
}

}  // namespace gmflow
