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

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gmflow/params.hpp"
#include "gmflow/tensor.hpp"

namespace gmflow {

/// Handle to a value recorded on a Graph.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

/// Decisions taken at non-differentiable points (relu side, sign of |x|,
/// bilinear cell, argmax). Recorded on one pass and replayed on another, so
/// that perturbed evaluations stay on the same smooth piece of the function.
struct BranchLog {
  std::vector<std::vector<std::int32_t>> slots;
};

enum class BranchMode { live, record, replay };

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits every node after all of its consumers.
///
/// A graph built with `record = false` only evaluates; no backward closures
/// are stored and intermediate values can be dropped by the caller.
template <class T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t self)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }

  void set_branch_mode(BranchMode mode, std::shared_ptr<BranchLog> log) {
    branch_mode_ = mode;
    branches_ = std::move(log);
    branch_cursor_ = 0;
  }
  BranchMode branch_mode() const noexcept { return branch_mode_; }

  /// Next decision slot of `n` entries, or nullptr in live mode. Ops call this
  /// in a fixed order, so record and replay passes see the same sequence.
  std::vector<std::int32_t>* branch_slot(std::size_t n) {
    if (branch_mode_ == BranchMode::live || !branches_) return nullptr;
    if (branch_mode_ == BranchMode::record) {
      branches_->slots.emplace_back(n, 0);
      return &branches_->slots.back();
    }
    if (branch_cursor_ >= branches_->slots.size() || branches_->slots[branch_cursor_].size() != n)
      throw Error("branch replay out of sync with the recorded pass");
    return &branches_->slots[branch_cursor_++];
  }

  /// Returns the recorded decision when replaying, otherwise `live` (stored
  /// when recording).
  std::int32_t decide(std::vector<std::int32_t>* slot, std::size_t i, std::int32_t live) const {
    if (!slot) return live;
    if (branch_mode_ == BranchMode::replay) return (*slot)[i];
    (*slot)[i] = live;
    return live;
  }

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// Leaf bound to a named parameter. Repeated calls with the same name return
  /// the same node so gradients of shared weights accumulate in one place.
  Var param(const ParamStore<T>& store, const std::string& name) {
    if (auto it = param_ids_.find(name); it != param_ids_.end()) return it->second;
    Var v = push(store.value(name), record_, {});
    param_ids_.emplace(name, v);
    return v;
  }

  /// Records an op result. `backward` runs only if some input needs a gradient.
  Var emit(Tensor<T> value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    if (record_)
      for (Var in : inputs) needs = needs || nodes_[in.id]->needs_grad;
    Var v = push(std::move(value), needs, needs ? std::move(backward) : Backward{});
    return v;
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id)->value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id)->needs_grad; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id)->needs_grad; }

  /// Gradient buffer of a node, allocated on first access.
  Tensor<T>& grad(std::size_t id) {
    auto& n = *nodes_.at(id);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  Tensor<T>& grad(Var v) { return grad(v.id); }
  bool has_grad(Var v) const { return nodes_.at(v.id)->grad.size() == nodes_.at(v.id)->value.size(); }

  /// Seeds d(loss)/d(loss) = seed and sweeps the tape backwards.
  void backward(Var loss, T seed = T(1)) {
    if (!record_) throw Error("backward called on a non-recording graph");
    if (value(loss).size() != 1) throw Error("backward: loss must be a scalar, got " + shape_str(value(loss).shape()));
    grad(loss)[0] += seed;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = *nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.size() != n.value.size()) continue;
      n.backward(*this, i);
    }
  }

  /// Adds every parameter gradient on this tape into the store's slots.
  void accumulate_into(ParamStore<T>& store, T scale = T(1)) {
    for (const auto& [name, v] : param_ids_) {
      if (!has_grad(v)) continue;
      auto& dst = store.grad(name);
      const auto& src = nodes_[v.id]->grad;
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += scale * src[i];
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    Backward backward;
  };

  Var push(Tensor<T> value, bool needs, Backward backward) {
    auto n = std::make_unique<Node>();
    n->value = std::move(value);
    n->needs_grad = needs;
    n->backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool record_;
  BranchMode branch_mode_ = BranchMode::live;
  std::shared_ptr<BranchLog> branches_;
  std::size_t branch_cursor_ = 0;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::map<std::string, Var> param_ids_;
};

}  // namespace gmflow
