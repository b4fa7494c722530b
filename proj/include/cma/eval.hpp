// SPDX-License-Identifier: Apache-2.0
//
// Evaluation: confusion matrix / mIoU, sliding-window inference and the
// cross-condition patch retrieval rate.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "cma/cdc.hpp"
#include "cma/model.hpp"
#include "cma/ops.hpp"
#include "cma/synthdata.hpp"
#include "cma/tensor.hpp"
#include "cma/warp.hpp"

namespace cma {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k = 0) : k_(k), counts_(k * k, 0) {}

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_.at(gt * k_ + pred); }

  void add(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt, std::uint8_t ignore = kIgnoreLabel) {
    require_same_shape(pred.shape(), gt.shape(), "confusion matrix");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      if (gt[i] >= k_ || pred[i] >= k_) {
        throw std::invalid_argument("confusion matrix: label out of range for " + std::to_string(k_) + " classes");
      }
      ++counts_[gt[i] * k_ + pred[i]];
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.k_ != k_) throw ShapeError("confusion matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;  // [gt][pred]
};

struct IouReport {
  std::vector<double> iou;       // NaN for classes absent from both
  std::vector<bool> included;
  double miou = 0.0;
};

inline IouReport iou_from_confusion(const ConfusionMatrix& cm) {
  const std::size_t k = cm.num_classes();
  IouReport r;
  r.iou.assign(k, std::numeric_limits<double>::quiet_NaN());
  r.included.assign(k, false);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
    r.included[c] = true;
    sum += r.iou[c];
    ++n;
  }
  r.miou = n ? sum / static_cast<double>(n) : 0.0;
  return r;
}

inline IouReport compute_miou(const std::vector<Tensor<std::uint8_t>>& preds, const std::vector<Tensor<std::uint8_t>>& gts,
                              std::size_t k, std::uint8_t ignore = kIgnoreLabel) {
  if (preds.size() != gts.size()) throw ShapeError("compute_miou: prediction and label counts differ");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], gts[i], ignore);
  return iou_from_confusion(cm);
}

// ---------------------------------------------------------------------------
// Sliding window.

// Offsets of square windows of side `side` along an axis of length `len`:
// the fewest windows whose spacing is at most half a side.
inline std::vector<std::size_t> window_offsets(std::size_t len, std::size_t side) {
  if (side == 0 || side > len) throw std::invalid_argument("window side must be in [1, len]");
  if (len == side) return {0};
  const std::size_t span = len - side;
  std::size_t n = 2;
  while (2 * span > side * (n - 1)) ++n;
  std::vector<std::size_t> off(n);
  for (std::size_t k = 0; k < n; ++k) {
    off[k] = static_cast<std::size_t>(std::llround(static_cast<double>(k * span) / static_cast<double>(n - 1)));
  }
  return off;
}

// Window side: min(H, W) rounded down to the model stride.
inline std::size_t window_side(std::size_t h, std::size_t w, std::size_t stride) {
  const std::size_t side = std::min(h, w) / stride * stride;
  if (side == 0) throw std::invalid_argument("image smaller than one model stride");
  return side;
}

template <class T>
Tensor<T> sliding_window_probabilities(const SegModel<T>& m, const Tensor<float>& image) {
  if (image.rank() != 3) throw ShapeError("sliding_window_predict expects [H, W, 3], got " + to_string(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2), k = m.config.num_classes;
  const std::size_t side = window_side(h, w, m.config.stride);
  const auto oy = window_offsets(h, side), ox = window_offsets(w, side);
  if (oy.size() == 1 && ox.size() == 1 && side == h && side == w) {
    return ops::softmax(forward(m, image.template cast<T>().reshaped({1, h, w, c}))).reshaped({h, w, k});
  }
  Tensor<T> acc({h, w, k});
  std::vector<std::uint32_t> cover(h * w, 0);
  for (std::size_t y0 : oy)
    for (std::size_t x0 : ox) {
      Tensor<T> win({1, side, side, c});
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            win[(y * side + x) * c + ch] = static_cast<T>(image[((y0 + y) * w + x0 + x) * c + ch]);
      const Tensor<T> p = ops::softmax(forward(m, win));
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          const std::size_t dst = (y0 + y) * w + x0 + x;
          ++cover[dst];
          for (std::size_t ch = 0; ch < k; ++ch) acc[dst * k + ch] += p[(y * side + x) * k + ch];
        }
    }
  for (std::size_t i = 0; i < h * w; ++i) {
    const T inv = T{1} / static_cast<T>(cover[i]);
    for (std::size_t ch = 0; ch < k; ++ch) acc[i * k + ch] *= inv;
  }
  return acc;
}

template <class T>
Tensor<std::uint8_t> sliding_window_predict(const SegModel<T>& m, const Tensor<float>& image) {
  return argmax_labels(sliding_window_probabilities(m, image));
}

template <class T>
IouReport evaluate_miou(const SegModel<T>& m, const std::vector<PairedSample>& samples) {
  ConfusionMatrix cm(m.config.num_classes);
  for (const auto& s : samples) cm.add(sliding_window_predict(m, s.target_image), s.target_labels);
  return iou_from_confusion(cm);
}

// ---------------------------------------------------------------------------
// Cross-condition retrieval: for every kept target patch embedding (anchor),
// is its nearest neighbour among all kept reference patch embeddings of the
// split the one at the same location of the same pair?

struct RetrievalReport {
  std::size_t queries = 0;
  std::size_t correct = 0;
  double rate() const { return queries ? static_cast<double>(correct) / static_cast<double>(queries) : 0.0; }
};

template <class T>
RetrievalReport patch_retrieval(const SegModel<T>& m, const ProjectionHead<T>& head,
                                const std::vector<PairedSample>& samples, std::size_t grid, double threshold) {
  const std::size_t s = m.config.stride, d = m.config.d_enc;
  std::vector<std::vector<T>> anchors, positives;
  for (const auto& smp : samples) {
    const std::size_t h = smp.height() / s, w = smp.width() / s;
    const Shape img = smp.target_image.shape();
    const Tensor<T> tf = encode(m, smp.target_image.template cast<T>().reshaped({1, img[0], img[1], img[2]}));
    const Shape rimg = smp.reference_image.shape();
    const Tensor<T> rf = encode(m, smp.reference_image.template cast<T>().reshaped({1, rimg[0], rimg[1], rimg[2]}));
    const WarpResult<T> warped =
        warp_features(rf.reshaped({rf.dim(1), rf.dim(2), d}), downsample_flow(smp.flow.template cast<T>(), s));
    const auto set =
        aggregate_patches(project(tf.reshaped({h, w, d}), head), project(warped.features, head), warped.confidence,
                          grid, static_cast<T>(threshold));
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (!set.keep_mask[i]) continue;
      anchors.emplace_back(set.anchors.data() + i * kEmbedDim, set.anchors.data() + (i + 1) * kEmbedDim);
      positives.emplace_back(set.positives.data() + i * kEmbedDim, set.positives.data() + (i + 1) * kEmbedDim);
    }
  }
  RetrievalReport r;
  r.queries = anchors.size();
  for (std::size_t q = 0; q < anchors.size(); ++q) {
    std::size_t best = 0;
    T best_sim = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < positives.size(); ++j) {
      const T sim = cdc_detail::dot(anchors[q].data(), positives[j].data(), kEmbedDim);
      if (sim > best_sim) {
        best_sim = sim;
        best = j;
      }
    }
    r.correct += best == q;
  }
  return r;
}

}  // namespace cma
