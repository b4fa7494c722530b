// SPDX-License-Identifier: Apache-2.0
//
// Dense flow application at feature resolution. Flow maps target positions
// to reference positions: target (x, y) looks up reference (x + dx, y + dy).

#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "cma/autodiff.hpp"
#include "cma/ops.hpp"
#include "cma/tensor.hpp"

namespace cma {

template <class T>
struct FlowField {
  Tensor<T> flow;        // [H, W, 2] (dx, dy)
  Tensor<T> confidence;  // [H, W] in [0, 1]

  std::size_t height() const { return confidence.dim(0); }
  std::size_t width() const { return confidence.dim(1); }

  void validate() const {
    if (confidence.rank() != 2 || flow.rank() != 3 || flow.dim(2) != 2 ||
        flow.dim(0) != confidence.dim(0) || flow.dim(1) != confidence.dim(1)) {
      throw ShapeError("flow field: flow " + to_string(flow.shape()) + " and confidence " +
                       to_string(confidence.shape()) + " disagree");
    }
    for (T c : confidence.values()) {
      if (!(c >= T{0} && c <= T{1})) throw std::domain_error("flow confidence outside [0, 1]");
    }
  }

  template <class U>
  FlowField<U> cast() const {
    return {flow.template cast<U>(), confidence.template cast<U>()};
  }

  static FlowField identity(std::size_t h, std::size_t w) {
    return {Tensor<T>({h, w, 2}), Tensor<T>({h, w}, T{1})};
  }
};

// Brings a pixel-resolution flow to a grid `stride` times coarser: flow and
// confidence are averaged over each stride x stride block, the flow is then
// expressed in coarse-grid units.
template <class T>
FlowField<T> downsample_flow(const FlowField<T>& f, std::size_t stride) {
  f.validate();
  const std::size_t h = f.height(), w = f.width();
  if (stride == 0 || h % stride || w % stride) {
    throw ShapeError("downsample_flow: " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by stride " + std::to_string(stride));
  }
  Tensor<T> flow = ops::avg_pool(f.flow.reshaped({1, h, w, 2}), stride, stride);
  Tensor<T> conf = ops::avg_pool(f.confidence.reshaped({1, h, w, 1}), stride, stride);
  const T inv = T{1} / static_cast<T>(stride);
  for (T& v : flow.values()) v *= inv;
  for (T& v : conf.values()) v = std::clamp(v, T{0}, T{1});
  const std::size_t ho = h / stride, wo = w / stride;
  return {flow.reshaped({ho, wo, 2}), conf.reshaped({ho, wo})};
}

// Absolute sampling coordinates [1, H, W, 2] for a flow field.
template <class T>
Tensor<T> sampling_coords(const FlowField<T>& f) {
  const std::size_t h = f.height(), w = f.width();
  Tensor<T> coords({1, h, w, 2});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t o = (y * w + x) * 2;
      coords[o] = static_cast<T>(x) + f.flow[o];
      coords[o + 1] = static_cast<T>(y) + f.flow[o + 1];
    }
  return coords;
}

template <class T>
struct WarpResult {
  Tensor<T> features;    // [H, W, C] on the flow grid
  Tensor<T> confidence;  // [H, W]
};

namespace warp_detail {

template <class T>
Tensor<T> min_confidence(const Tensor<T>& conf, const Tensor<T>& valid) {
  Tensor<T> out(conf.shape());
  for (std::size_t i = 0; i < conf.size(); ++i) out[i] = valid[i] > T{0} ? conf[i] : T{0};
  return out;
}

inline void check_ref(const Shape& s) {
  if (s.size() != 3) throw ShapeError("warp_features expects [H, W, C] reference features, got " + to_string(s));
}

}  // namespace warp_detail

// Bilinearly samples reference features [Hr, Wr, C] at the flow's target
// positions. Samples that touch the outside of the reference extent are zero
// and their confidence is forced to 0.
template <class T>
WarpResult<T> warp_features(const Tensor<T>& ref_feats, const FlowField<T>& f) {
  f.validate();
  warp_detail::check_ref(ref_feats.shape());
  const Shape rs = ref_feats.shape();
  auto r = ops::grid_sample(ref_feats.reshaped({1, rs[0], rs[1], rs[2]}), sampling_coords(f));
  const std::size_t h = f.height(), w = f.width();
  return {r.values.reshaped({h, w, rs[2]}),
          warp_detail::min_confidence(f.confidence, r.valid.reshaped({h, w}))};
}

// Differentiable variant: gradient flows into the reference features.
template <class T>
Var warp_features(Tape<T>& tape, Var ref_feats, const FlowField<T>& f, Tensor<T>* confidence) {
  f.validate();
  warp_detail::check_ref(tape.value(ref_feats).shape());
  const Shape rs = tape.value(ref_feats).shape();
  Tensor<T> valid;
  Var src = tape.reshape(ref_feats, {1, rs[0], rs[1], rs[2]});
  Var out = tape.grid_sample(src, sampling_coords(f), &valid);
  const std::size_t h = f.height(), w = f.width();
  if (confidence) *confidence = warp_detail::min_confidence(f.confidence, valid.reshaped({h, w}));
  return tape.reshape(out, {h, w, rs[2]});
}

}  // namespace cma
