// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cmt/autodiff.hpp"
#include "cmt/params.hpp"

namespace cmt {

/// A scalar-valued function of named parameters, built on a tape.
using LossFn = std::function<Var(Tape&, ParamBinder&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-5;
  /// Denominator floor for the relative error |a-n| / max(|a|, |n|, floor).
  /// Below it the comparison is effectively absolute.
  double floor = 1e-4;
  /// Coordinates checked per parameter tensor; 0 checks all of them.
  /// When limited, coordinates are drawn without replacement from `seed`.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  std::size_t flagged = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  std::size_t flagged = 0;
  std::size_t checked = 0;

  bool passed() const noexcept { return flagged == 0; }
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {
inline double eval_scalar(const LossFn& f, const ParameterSet& params) {
  Tape tape(false);
  ParamBinder bind(tape, params);
  const Tensor& v = f(tape, bind).value();
  if (v.size() != 1) throw DimensionError("grad_check: function must return a scalar");
  if (!std::isfinite(v[0])) throw EvaluationError("grad_check: function value is not finite");
  return v[0];
}
}  // namespace detail

/// Compares tape gradients of `f` against central differences.
inline GradCheckReport grad_check(const LossFn& f, ParameterSet params, const GradCheckOptions& opt = {}) {
  if (!(opt.eps >= 1e-7 && opt.eps <= 1e-4))
    throw ConfigError("grad_check: eps must lie in [1e-7, 1e-4], got " + std::to_string(opt.eps));
  for (const auto& [name, t] : params)
    if (!t.all_finite()) throw EvaluationError("grad_check: parameter '" + name + "' is not finite");

  GradientSet analytic;
  {
    Tape tape;
    ParamBinder bind(tape, params);
    Var loss = f(tape, bind);
    if (!std::isfinite(loss.value()[0])) throw EvaluationError("grad_check: function value is not finite");
    tape.backward(loss);
    analytic = bind.gradients();
  }

  GradCheckReport report;
  Rng rng(opt.seed);
  for (auto& [name, tensor] : params) {
    std::vector<std::size_t> coords(tensor.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords != 0 && coords.size() > opt.max_coords) {
      for (std::size_t i = 0; i < opt.max_coords; ++i)
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      coords.resize(opt.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    ParamCheck pc{name, 0, 0, 0.0};
    const Tensor& g = analytic.at(name);
    for (auto c : coords) {
      const double orig = tensor[c];
      tensor[c] = orig + opt.eps;
      const double up = detail::eval_scalar(f, params);
      tensor[c] = orig - opt.eps;
      const double down = detail::eval_scalar(f, params);
      tensor[c] = orig;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double err = relative_error(g[c], numeric, opt.floor);
      pc.max_rel_error = std::max(pc.max_rel_error, err);
      ++pc.checked;
      if (err > opt.tolerance) ++pc.flagged;
    }
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.flagged += pc.flagged;
    report.checked += pc.checked;
    report.params.push_back(std::move(pc));
  }
  return report;
}

}  // namespace cmt
