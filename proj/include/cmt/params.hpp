// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>

#include "cmt/autodiff.hpp"
#include "cmt/rng.hpp"
#include "cmt/tensor.hpp"

namespace cmt {

/// Named parameter tensors, ordered by name so iteration (and therefore
/// every reduction over parameters) has a fixed order.
using ParameterSet = std::map<std::string, Tensor>;

/// Per-parameter gradients, keyed like the ParameterSet they belong to.
using GradientSet = std::map<std::string, Tensor>;

/// Glorot-style uniform init in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor init_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

inline Tensor init_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  return init_uniform({rows, cols}, rows, cols, rng);
}

/// Lazily exposes parameters of a set as tape leaves.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParameterSet& params) : tape_(tape), params_(params) {}

  Tape& tape() noexcept { return tape_; }

  Var operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    auto p = params_.find(name);
    if (p == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    Var v = tape_.leaf(p->second);
    bound_.emplace(name, v);
    return v;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  /// Gradients for every parameter in the set; unused ones are zero.
  GradientSet gradients() const {
    GradientSet g;
    for (const auto& [name, value] : params_) {
      auto it = bound_.find(name);
      g.emplace(name, it == bound_.end() ? Tensor(value.shape(), 0.0) : tape_.grad(it->second));
    }
    return g;
  }

 private:
  Tape& tape_;
  const ParameterSet& params_;
  std::map<std::string, Var> bound_;
};

inline std::size_t parameter_count(const ParameterSet& p) {
  std::size_t n = 0;
  for (const auto& [_, t] : p) n += t.size();
  return n;
}

}  // namespace cmt
