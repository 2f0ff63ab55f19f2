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

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gmflow/random.hpp"
#include "gmflow/tensor.hpp"

namespace gmflow {

/// Named learnable tensors with one gradient slot each. Names are kept in
/// sorted order, which is also the serialization order.
template <class T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> value;
    Tensor<T> grad;
  };

  void add(const std::string& name, Tensor<T> value) {
    if (entries_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    Tensor<T> g(value.shape());
    entries_.emplace(name, Entry{std::move(value), std::move(g)});
  }

  /// Weight drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  void add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    add(name, std::move(t));
  }
  void add_constant(const std::string& name, Shape shape, T fill) { add(name, Tensor<T>(std::move(shape), fill)); }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor<T>& value(const std::string& name) const { return find(name).value; }
  Tensor<T>& value(const std::string& name) { return find(name).value; }
  Tensor<T>& grad(const std::string& name) { return find(name).grad; }
  const Tensor<T>& grad(const std::string& name) const { return find(name).grad; }

  std::map<std::string, Entry>& entries() noexcept { return entries_; }
  const std::map<std::string, Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.grad.fill(T(0));
  }

  bool all_finite() const {
    for (const auto& [_, e] : entries_)
      if (!e.value.all_finite()) return false;
    return true;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>());
    return out;
  }

 private:
  Entry& find(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  const Entry& find(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

// Checkpoint layout (all integers little-endian):
//   "GMFP"  u32 version  u64 meta_len  meta bytes  u64 count
//   per parameter, sorted by name:
//     u64 name_len  name bytes  u64 rank  u64 extents[rank]  f32 data[numel]
inline constexpr char kCheckpointMagic[4] = {'G', 'M', 'F', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}
inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw Error(path_ + ": truncated file");
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  const std::string& path() const { return path_; }

 private:
  std::istream& is_;
  std::string path_;
};

}  // namespace detail

template <class T>
void save_params(const std::string& path, const ParamStore<T>& store, const std::string& meta = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u64(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put_u64(os, store.size());
  for (const auto& [name, e] : store.entries()) {
    detail::put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(os, e.value.rank());
    for (auto d : e.value.shape()) detail::put_u64(os, d);
    for (T v : e.value.values()) detail::put_f32(os, static_cast<float>(v));
  }
  if (!os) throw Error("write to '" + path + "' failed");
}

struct LoadedParams {
  ParamStore<float> params;
  std::string meta;
};

inline LoadedParams load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint '" + path + "'");
  detail::Reader r(is, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw Error(path + ": not a parameter checkpoint (bad magic)");
  if (auto v = r.u32(); v != kCheckpointVersion)
    throw Error(path + ": unsupported checkpoint version " + std::to_string(v));
  LoadedParams out;
  const auto meta_len = r.u64();
  if (meta_len > (1u << 20)) throw Error(path + ": implausible metadata length");
  out.meta.resize(meta_len);
  r.bytes(out.meta.data(), meta_len);
  const auto count = r.u64();
  if (count > 100000) throw Error(path + ": implausible parameter count");
  for (std::uint64_t p = 0; p < count; ++p) {
    const auto name_len = r.u64();
    if (name_len == 0 || name_len > 4096) throw Error(path + ": implausible parameter name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const auto rank = r.u64();
    if (rank > 8) throw Error(path + ": implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u64();
      if (d > (1u << 28)) throw Error(path + ": implausible extent for '" + name + "'");
    }
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = r.f32();
    out.params.add(name, std::move(t));
  }
  return out;
}

}  // namespace gmflow
