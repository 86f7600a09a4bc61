#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>

#include "dalab/autodiff.hpp"
#include "dalab/digest.hpp"
#include "dalab/rng.hpp"

namespace dalab {

/// Named trainable tensors, ordered by name.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    auto [it, inserted] = map_.insert_or_assign(name, std::move(t));
    return it->second;
  }

  /// Weights U(-gain/sqrt(in), gain/sqrt(in)), zero bias.
  void add_linear(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                  double gain = 1.0) {
    const double bound = gain / std::sqrt(static_cast<double>(in));
    Tensor w = Tensor::matrix(in, out);
    for (double& x : w.values()) x = rng.uniform(-bound, bound);
    add(prefix + ".w", std::move(w));
    add(prefix + ".b", Tensor({1, out}));
  }

  bool contains(const std::string& name) const { return map_.contains(name); }
  Tensor& at(const std::string& name) { return lookup(name); }
  const Tensor& at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->lookup(name);
  }

  std::size_t size() const { return map_.size(); }
  auto begin() { return map_.begin(); }
  auto end() { return map_.end(); }
  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }

  void bind(Feeds& feeds) const {
    for (const auto& [name, t] : map_) feeds.bind(name, t);
  }

  void merge(const ParamSet& other) {
    for (const auto& [name, t] : other.map_) add(name, t);
  }

  /// Parameters whose name starts with any of `prefixes`.
  ParamSet filtered(std::initializer_list<std::string_view> prefixes) const {
    ParamSet out;
    for (const auto& [name, t] : map_) {
      for (std::string_view p : prefixes) {
        if (name.starts_with(p)) {
          out.add(name, t);
          break;
        }
      }
    }
    return out;
  }

  void remove_prefix(std::string_view prefix) {
    std::erase_if(map_, [&](const auto& kv) { return kv.first.starts_with(prefix); });
  }

  void write(ByteWriter& w) const {
    w.u64(map_.size());
    for (const auto& [name, t] : map_) {
      w.str(name);
      w.tensor(t);
    }
  }

  static ParamSet read(ByteReader& r) {
    ParamSet p;
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = r.str();
      p.add(name, r.tensor());
    }
    return p;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.map_ == b.map_; }

 private:
  Tensor& lookup(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Tensor> map_;
};

/// Graph input nodes for the `.w`/`.b` pair under `prefix`, then x @ w + b.
inline NodeId linear(Graph& g, NodeId x, const std::string& prefix) {
  return g.add(g.matmul(x, g.input(prefix + ".w")), g.input(prefix + ".b"));
}

}  // namespace dalab
