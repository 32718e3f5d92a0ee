#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cotok/autograd.hpp"
#include "cotok/tensor.hpp"

namespace cotok {

/// Named trainable tensors, kept in name order so iteration (and therefore
/// optimizer updates and checkpoints) is deterministic.
template <class T>
class ParamStore {
 public:
  /// Glorot-uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
  void add_glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    insert(name, random_tensor<T>(std::move(shape), rng, -a, a));
  }
  void add_constant(const std::string& name, Shape shape, T value) { insert(name, Tensor<T>(std::move(shape), value)); }

  void insert(const std::string& name, Tensor<T> value) {
    if (!tensors_.emplace(name, std::move(value)).second) throw Error("duplicate parameter '" + name + "'");
  }

  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  std::map<std::string, Tensor<T>>& tensors() { return tensors_; }
  const std::map<std::string, Tensor<T>>& tensors() const { return tensors_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : tensors_) out.insert(name, t.template cast<U>());
    return out;
  }

 private:
  std::map<std::string, Tensor<T>> tensors_;
};

template <class T>
using GradMap = std::map<std::string, std::vector<T>>;

/// Registers parameters on a tape on first use so each tensor becomes exactly
/// one leaf per forward pass.
template <class T>
class ParamBinder {
 public:
  ParamBinder(Tape<T>& tape, const ParamStore<T>& store) : tape_(&tape), store_(&store) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Var<T> v = tape_->leaf(store_->at(name));
    bound_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() { return *tape_; }
  const ParamStore<T>& store() const { return *store_; }

  /// Gradients of every parameter in the store; untouched ones are zero.
  GradMap<T> grads() const {
    GradMap<T> out;
    for (const auto& [name, t] : store_->tensors()) {
      auto it = bound_.find(name);
      out.emplace(name, it == bound_.end() ? std::vector<T>(t.size(), T{0}) : tape_->grad(it->second));
    }
    return out;
  }

 private:
  Tape<T>* tape_;
  const ParamStore<T>* store_;
  std::map<std::string, Var<T>> bound_;
};

// ---------------------------------------------------------------------------
// Checkpoints: a text manifest ("name rank d0 d1 ...") terminated by "end",
// followed by every tensor as little-endian float32 in manifest order.

namespace detail {

inline void put_le_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                              static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline float get_le_f32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out << "cotok-checkpoint 1\n" << store.tensors().size() << "\n";
  for (const auto& [name, t] : store.tensors()) {
    out << name << ' ' << t.shape.size();
    for (auto d : t.shape) out << ' ' << d;
    out << '\n';
  }
  out << "end\n";
  for (const auto& [_, t] : store.tensors())
    for (T v : t.data) detail::put_le_f32(out, static_cast<float>(v));
  if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

template <class T>
ParamStore<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line != "cotok-checkpoint 1") throw Error(path + ": not a checkpoint file");
  std::getline(in, line);
  const std::size_t count = std::stoul(line);
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw Error(path + ": truncated manifest");
    std::istringstream ls(line);
    std::string name;
    std::size_t rank = 0;
    ls >> name >> rank;
    Shape shape(rank);
    for (auto& d : shape) ls >> d;
    if (!ls) throw Error(path + ": bad manifest line '" + line + "'");
    manifest.emplace_back(name, shape);
  }
  std::getline(in, line);
  if (line != "end") throw Error(path + ": manifest not terminated by 'end'");
  ParamStore<T> store;
  for (auto& [name, shape] : manifest) {
    Tensor<T> t(shape);
    for (auto& v : t.data) v = static_cast<T>(detail::get_le_f32(in));
    if (!in) throw Error(path + ": truncated tensor data for '" + name + "'");
    store.insert(name, std::move(t));
  }
  return store;
}

}  // namespace cotok
