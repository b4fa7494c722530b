// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference check of analytic gradients held in ParamGroups.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cma/autodiff.hpp"

namespace cma {

struct GroupCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  double tol = 0.0;
  bool passed = false;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.max_rel_error);
    return m;
  }
};

class NondeterministicLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  // Perturbation is step * max(1, |theta|).
  double step = 1e-4;
  double tol = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // gradients that are zero up to rounding from dominating the report.
  double floor = 1e-6;
  // Check at most this many coordinates per group (evenly strided), 0 = all.
  std::size_t max_per_group = 0;
};

// `loss_fn` evaluates the loss from the current group values. `grad_fn`
// evaluates the loss and leaves analytic gradients in each group's grad.
template <class T>
GradCheckReport finite_difference_check(const std::function<T()>& loss_fn,
                                        const std::function<void()>& grad_fn,
                                        const std::vector<ParamGroup<T>*>& groups,
                                        const GradCheckOptions& opt = {}) {
  const T first = loss_fn();
  const T second = loss_fn();
  if (first != second) {
    throw NondeterministicLoss("loss differs across repeated evaluation: " +
                               std::to_string(static_cast<double>(first)) + " vs " +
                               std::to_string(static_cast<double>(second)));
  }
  for (auto* g : groups) g->zero_grad();
  grad_fn();

  GradCheckReport report;
  report.tol = opt.tol;
  for (auto* g : groups) {
    GroupCheck gc;
    gc.name = g->name;
    if (!g->trainable) {
      report.groups.push_back(gc);
      continue;
    }
    const std::size_t n = g->value.size();
    const std::size_t stride =
        opt.max_per_group == 0 || n <= opt.max_per_group ? 1 : n / opt.max_per_group;
    for (std::size_t i = 0; i < n; i += stride) {
      const T orig = g->value[i];
      const T h = static_cast<T>(opt.step * std::max(1.0, std::abs(static_cast<double>(orig))));
      g->value[i] = orig + h;
      const double lp = static_cast<double>(loss_fn());
      g->value[i] = orig - h;
      const double lm = static_cast<double>(loss_fn());
      g->value[i] = orig;
      const double numeric = (lp - lm) / (2.0 * static_cast<double>(h));
      const double analytic = static_cast<double>(g->grad[i]);
      const double abs_err = std::abs(analytic - numeric);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      const double rel = abs_err / denom;
      if (rel > gc.max_rel_error) {
        gc.max_rel_error = rel;
        gc.worst_index = i;
      }
      gc.max_abs_error = std::max(gc.max_abs_error, abs_err);
      ++gc.checked;
    }
    report.groups.push_back(gc);
  }
  for (auto* g : groups) g->zero_grad();
  report.passed = report.max_rel_error() < opt.tol;
  return report;
}

// Tape-based form: `build` records the loss on a fresh tape and returns it.
template <class T>
GradCheckReport finite_difference_check(const std::function<Var(Tape<T>&)>& build,
                                        const std::vector<ParamGroup<T>*>& groups,
                                        const GradCheckOptions& opt = {}) {
  const std::function<T()> loss_fn = [&] {
    Tape<T> tape;
    return tape.value(build(tape)).item();
  };
  const std::function<void()> grad_fn = [&] {
    Tape<T> tape;
    tape.backward(build(tape));
  };
  return finite_difference_check<T>(loss_fn, grad_fn, groups, opt);
}

}  // namespace cma
