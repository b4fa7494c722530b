// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "cma/autodiff.hpp"

namespace cma {

template <class T>
struct AdamWState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0.01);
};

// One update over `groups` (the same groups, in the same order, on every
// call). Effective rate per group is lr * lr_multiplier. Groups that received
// no gradient are left untouched. Gradients are zeroed afterwards.
template <class T>
void adamw_step(AdamWState<T>& state, std::span<ParamGroup<T>* const> groups, T lr) {
  bool any = false;
  for (const ParamGroup<T>* g : groups) any = any || (g->trainable && g->has_grad);
  if (!any) throw std::logic_error("adamw_step called before any backward pass");

  if (state.m.empty()) {
    for (const ParamGroup<T>* g : groups) {
      state.m.emplace_back(g->value.shape());
      state.v.emplace_back(g->value.shape());
    }
  }
  if (state.m.size() != groups.size()) {
    throw ShapeError("AdamW state holds " + std::to_string(state.m.size()) +
                     " moment pairs for " + std::to_string(groups.size()) + " groups");
  }

  ++state.step;
  const T t = static_cast<T>(state.step);
  const T bc1 = T{1} - std::pow(state.beta1, t);
  const T bc2 = T{1} - std::pow(state.beta2, t);

  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    ParamGroup<T>& g = *groups[gi];
    Tensor<T>& m = state.m[gi];
    Tensor<T>& v = state.v[gi];
    require_same_shape(m.shape(), g.value.shape(), "adamw moments");
    require_same_shape(g.grad.shape(), g.value.shape(), "adamw grad");
    if (g.trainable && g.has_grad) {
      const T rate = lr * g.lr_multiplier;
      for (std::size_t i = 0; i < g.value.size(); ++i) {
        const T grad = g.grad[i];
        m[i] = state.beta1 * m[i] + (T{1} - state.beta1) * grad;
        v[i] = state.beta2 * v[i] + (T{1} - state.beta2) * grad * grad;
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        g.value[i] -= rate * (mhat / (std::sqrt(vhat) + state.eps) +
                              state.weight_decay * g.value[i]);
      }
      require_finite(g.value, "adamw_step");
    }
    g.zero_grad();
  }
}

template <class T>
void adamw_step(AdamWState<T>& state, const std::vector<ParamGroup<T>*>& groups, T lr) {
  adamw_step(state, std::span<ParamGroup<T>* const>(groups.data(), groups.size()), lr);
}

}  // namespace cma
