// SPDX-License-Identifier: Apache-2.0
//
// Cross-domain contrastive loss: projection head, confidence-weighted patch
// aggregation, InfoNCE against a FIFO queue of negatives, and the EMA teacher
// update.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cma/autodiff.hpp"
#include "cma/cmat.hpp"
#include "cma/ops.hpp"
#include "cma/tensor.hpp"

namespace cma {

inline constexpr std::size_t kEmbedDim = 128;

struct CdcConfig {
  std::size_t grid = 7;
  double threshold = 0.2;
  double tau = 0.3;
  std::size_t queue_capacity = 65536;

  static CdcConfig acdc() { return {}; }
  static CdcConfig dark_zurich() {
    CdcConfig c;
    c.tau = 0.03;
    return c;
  }

  void validate() const {
    if (grid == 0) throw std::invalid_argument("cdc grid must be positive");
    if (!(tau > 0.0)) throw std::invalid_argument("cdc temperature must be positive");
    if (queue_capacity == 0) throw std::invalid_argument("queue capacity must be positive");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("keep threshold outside [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Projection head: linear(d, d) -> ReLU -> linear(d, 128), per position.

template <class T>
struct ProjectionHead {
  ParamGroup<T> w1, b1, w2, b2;

  ProjectionHead() = default;
  ProjectionHead(std::size_t d_enc, std::uint64_t seed, const std::string& prefix = "proj")
      : w1(prefix + ".w1", Tensor<T>({d_enc, d_enc})),
        b1(prefix + ".b1", Tensor<T>({d_enc})),
        w2(prefix + ".w2", Tensor<T>({d_enc, kEmbedDim})),
        b2(prefix + ".b2", Tensor<T>({kEmbedDim})) {
    if (d_enc == 0) throw std::invalid_argument("projection head input dim must be positive");
    std::mt19937_64 rng(seed);
    const auto fill = [&rng](Tensor<T>& w) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w.dim(0)));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (T& v : w.values()) v = static_cast<T>(u(rng));
    };
    fill(w1.value);
    fill(w2.value);
  }

  std::size_t input_dim() const { return w1.value.dim(0); }
  std::size_t output_dim() const { return w2.value.dim(1); }

  std::vector<ParamGroup<T>*> groups() { return {&w1, &b1, &w2, &b2}; }
  std::vector<const ParamGroup<T>*> groups() const { return {&w1, &b1, &w2, &b2}; }

  void set_trainable(bool on) {
    for (auto* g : groups()) g->trainable = on;
  }
  void set_lr_multiplier(T m) {
    if (!(m > T{0})) throw std::invalid_argument("lr_multiplier must be positive");
    for (auto* g : groups()) g->lr_multiplier = m;
  }
};

namespace cdc_detail {

template <class T>
void check_head_input(const Shape& s, const ProjectionHead<T>& head) {
  if (s.empty() || s.back() != head.input_dim()) {
    throw ShapeError("project: features " + to_string(s) + " do not match head input dim " +
                     std::to_string(head.input_dim()));
  }
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T s{0};
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class T>
T norm(const T* a, std::size_t n) {
  return std::sqrt(dot(a, a, n));
}

inline void check_grid(const Shape& s, std::size_t g, const char* what) {
  if (g == 0) throw std::invalid_argument(std::string(what) + ": grid size must be positive");
  if (s.size() != 3) throw ShapeError(std::string(what) + ": expected [H, W, C], got " + to_string(s));
  if (s[0] < g || s[1] < g) {
    throw ShapeError(std::string(what) + ": grid " + std::to_string(g) + " exceeds extent " + to_string(s));
  }
}

template <class T>
void check_confidence(const Tensor<T>& conf, std::size_t h, std::size_t w) {
  require_same_shape(conf.shape(), Shape{h, w}, "aggregate_patches confidence");
  for (T c : conf.values()) {
    if (!(c >= T{0} && c <= T{1})) throw std::domain_error("aggregate_patches: confidence outside [0, 1]");
  }
}

template <class T>
Tensor<T> as_batch(const Tensor<T>& z) {
  return z.reshaped({1, z.dim(0), z.dim(1), z.dim(2)});
}

}  // namespace cdc_detail

template <class T>
Tensor<T> project(const Tensor<T>& features, const ProjectionHead<T>& head) {
  cdc_detail::check_head_input(features.shape(), head);
  return ops::linear(ops::relu(ops::linear(features, head.w1.value, head.b1.value)), head.w2.value,
                     head.b2.value);
}

template <class T>
Var project(Tape<T>& tape, Var features, ProjectionHead<T>& head) {
  cdc_detail::check_head_input(tape.value(features).shape(), head);
  Var h = tape.relu(tape.linear(features, tape.param(head.w1), tape.param(head.b1)));
  return tape.linear(h, tape.param(head.w2), tape.param(head.b2));
}

// ---------------------------------------------------------------------------
// Patch aggregation.

template <class T>
struct PatchEmbeddingSet {
  Tensor<T> anchors;    // [P, C]
  Tensor<T> positives;  // [P, C]
  std::vector<T> mean_confidence;
  std::vector<bool> keep_mask;
  std::size_t grid = 0;

  std::size_t size() const { return keep_mask.size(); }
  std::size_t kept() const { return static_cast<std::size_t>(std::count(keep_mask.begin(), keep_mask.end(), true)); }
};

// Block mean of the confidence map, one value per patch.
template <class T>
std::vector<T> patch_mean_confidence(const Tensor<T>& conf, std::size_t g) {
  const std::size_t h = conf.dim(0), w = conf.dim(1);
  Tensor<T> m = ops::block_mean(conf.reshaped({1, h, w, 1}), g);
  return {m.values().begin(), m.values().end()};
}

// L2-normalized confidence-weighted block sums, [P, C].
template <class T>
Tensor<T> weighted_patch_embeddings(const Tensor<T>& z, const Tensor<T>& conf, std::size_t g) {
  const std::size_t p = g * g, c = z.dim(2);
  return ops::l2_normalize(ops::block_weighted_sum(cdc_detail::as_batch(z), conf.reshaped({1, z.dim(0), z.dim(1)}), g)
                               .reshaped({p, c}));
}

template <class T>
PatchEmbeddingSet<T> aggregate_patches(const Tensor<T>& z_a, const Tensor<T>& z_p, const Tensor<T>& conf,
                                       std::size_t g, T threshold) {
  cdc_detail::check_grid(z_a.shape(), g, "aggregate_patches");
  require_same_shape(z_p.shape(), z_a.shape(), "aggregate_patches positives");
  cdc_detail::check_confidence(conf, z_a.dim(0), z_a.dim(1));
  PatchEmbeddingSet<T> s;
  s.grid = g;
  s.anchors = weighted_patch_embeddings(z_a, conf, g);
  s.positives = weighted_patch_embeddings(z_p, conf, g);
  s.mean_confidence = patch_mean_confidence(conf, g);
  for (T c : s.mean_confidence) s.keep_mask.push_back(c >= threshold);
  return s;
}

// Differentiable anchors for the student path, [P, C].
template <class T>
Var aggregate_anchors(Tape<T>& tape, Var z_a, const Tensor<T>& conf, std::size_t g) {
  const Shape s = tape.value(z_a).shape();
  cdc_detail::check_grid(s, g, "aggregate_anchors");
  cdc_detail::check_confidence(conf, s[0], s[1]);
  Var b = tape.reshape(z_a, {1, s[0], s[1], s[2]});
  Var sum = tape.block_weighted_sum(b, conf.reshaped({1, s[0], s[1]}), g);
  return tape.l2_normalize(tape.reshape(sum, {g * g, s[2]}));
}

// Unweighted block means, L2-normalized; an all-zero block stays zero.
template <class T>
Tensor<T> aggregate_negatives(const Tensor<T>& z, std::size_t g) {
  cdc_detail::check_grid(z.shape(), g, "aggregate_negatives");
  return ops::l2_normalize(ops::block_mean(cdc_detail::as_batch(z), g).reshaped({g * g, z.dim(2)}));
}

// ---------------------------------------------------------------------------
// Negative queue.

template <class T>
class NegativeQueue {
 public:
  static constexpr double kUnitTolerance = 1e-4;

  NegativeQueue() = default;
  NegativeQueue(std::size_t capacity, std::size_t dim = kEmbedDim)
      : capacity_(capacity), dim_(dim), ring_({capacity, dim}) {
    if (capacity == 0 || dim == 0) throw std::invalid_argument("queue capacity and dim must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  std::size_t cursor() const { return cursor_; }

  // Appends rows of `batch` [N, dim] in order, evicting the oldest entries
  // past capacity. All-zero rows are skipped. Returns the number stored.
  std::size_t enqueue(const Tensor<T>& batch) {
    if (batch.rank() != 2 || batch.dim(1) != dim_) {
      throw ShapeError("enqueue: expected [N, " + std::to_string(dim_) + "], got " + to_string(batch.shape()));
    }
    const std::size_t n = batch.dim(0);
    std::vector<bool> keep(n);
    for (std::size_t r = 0; r < n; ++r) {
      const T* row = batch.data() + r * dim_;
      const double nrm = static_cast<double>(cdc_detail::norm(row, dim_));
      keep[r] = nrm != 0.0;
      if (keep[r] && std::abs(nrm - 1.0) > kUnitTolerance) {
        throw std::domain_error("enqueue: entry " + std::to_string(r) + " has norm " + std::to_string(nrm));
      }
    }
    std::size_t stored = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (!keep[r]) continue;
      std::copy_n(batch.data() + r * dim_, dim_, ring_.data() + cursor_ * dim_);
      cursor_ = (cursor_ + 1) % capacity_;
      size_ = std::min(size_ + 1, capacity_);
      ++stored;
    }
    return stored;
  }

  // Entries oldest first, [size, dim].
  Tensor<T> snapshot() const {
    Tensor<T> out({size_, dim_});
    const std::size_t start = size_ < capacity_ ? 0 : cursor_;
    for (std::size_t i = 0; i < size_; ++i) {
      std::copy_n(ring_.data() + ((start + i) % capacity_) * dim_, dim_, out.data() + i * dim_);
    }
    return out;
  }

  // Checkpoint layout: <stem>.entries.cmat holds the raw ring [size, dim];
  // <stem>.state.cmat holds i32 [capacity, size, cursor].
  void save(const std::filesystem::path& stem) const {
    Tensor<T> raw({size_, dim_});
    std::copy_n(ring_.data(), size_ * dim_, raw.data());
    write_cmat(with_suffix(stem, ".entries.cmat"), raw);
    Tensor<std::int32_t> state({3}, {static_cast<std::int32_t>(capacity_), static_cast<std::int32_t>(size_),
                                     static_cast<std::int32_t>(cursor_)});
    write_cmat(with_suffix(stem, ".state.cmat"), state);
  }

  static NegativeQueue load(const std::filesystem::path& stem) {
    const auto state = read_cmat<std::int32_t>(with_suffix(stem, ".state.cmat"));
    const auto raw = read_cmat<T>(with_suffix(stem, ".entries.cmat"));
    if (state.shape() != Shape{3} || raw.rank() != 2 || state[0] <= 0 || state[1] < 0 || state[2] < 0 ||
        state[1] > state[0] || state[2] >= state[0] || static_cast<std::size_t>(state[1]) != raw.dim(0) ||
        (state[1] < state[0] && state[2] != state[1])) {
      throw FormatError("queue checkpoint " + stem.string() + " is inconsistent");
    }
    NegativeQueue q(static_cast<std::size_t>(state[0]), raw.dim(1));
    std::copy_n(raw.data(), raw.size(), q.ring_.data());
    q.size_ = static_cast<std::size_t>(state[1]);
    q.cursor_ = static_cast<std::size_t>(state[2]);
    return q;
  }

 private:
  static std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
    return stem.parent_path() / (stem.filename().string() + suffix);
  }

  std::size_t capacity_ = 0, dim_ = kEmbedDim, size_ = 0, cursor_ = 0;
  Tensor<T> ring_;
};

// ---------------------------------------------------------------------------
// InfoNCE.

namespace cdc_detail {

inline void check_nce_inputs(double tau, std::size_t m) {
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
  if (m == 0) throw std::invalid_argument("info_nce: empty negative set");
}

// Per-anchor loss and softmax weights over [positive, negatives...] for
// anchors [P, C], positives [P, C], negatives [M, C].
template <class T>
struct NceTerms {
  std::vector<T> loss;        // [P]
  Tensor<T> pos_weight;       // [P]
  Tensor<T> neg_weight;       // [P, M]
};

template <class T>
NceTerms<T> nce_terms(const Tensor<T>& anchors, const Tensor<T>& positives, const Tensor<T>& negatives, T tau,
                      const std::vector<bool>* rows) {
  const std::size_t p = anchors.dim(0), c = anchors.dim(1), m = negatives.dim(0);
  const Tensor<T> neg_t = ops::transpose2d(negatives);
  Tensor<T> logits({p, m});
  ops::gemm_acc(anchors.data(), neg_t.data(), logits.data(), p, c, m);
  NceTerms<T> out{std::vector<T>(p, T{0}), Tensor<T>({p}), Tensor<T>({p, m})};
  const T inv_tau = T{1} / tau;
  for (std::size_t i = 0; i < p; ++i) {
    if (rows && !(*rows)[i]) continue;
    T* li = logits.data() + i * m;
    const T lp = dot(anchors.data() + i * c, positives.data() + i * c, c) * inv_tau;
    T mx = lp;
    for (std::size_t j = 0; j < m; ++j) {
      li[j] *= inv_tau;
      mx = std::max(mx, li[j]);
    }
    T z = std::exp(lp - mx);
    for (std::size_t j = 0; j < m; ++j) z += std::exp(li[j] - mx);
    out.loss[i] = std::log(z) + mx - lp;
    out.pos_weight[i] = std::exp(lp - mx) / z;
    for (std::size_t j = 0; j < m; ++j) out.neg_weight[i * m + j] = std::exp(li[j] - mx) / z;
  }
  return out;
}

template <class T>
void check_set_shapes(const Tensor<T>& anchors, const Tensor<T>& positives, const Tensor<T>& negatives,
                      std::size_t mask_size) {
  if (anchors.rank() != 2 || positives.shape() != anchors.shape() || negatives.rank() != 2 ||
      negatives.dim(1) != anchors.dim(1) || mask_size != anchors.dim(0)) {
    throw ShapeError("cdc_loss: anchors " + to_string(anchors.shape()) + ", positives " +
                     to_string(positives.shape()) + ", negatives " + to_string(negatives.shape()) +
                     ", mask " + std::to_string(mask_size));
  }
}

}  // namespace cdc_detail

// Single-anchor InfoNCE; a, p are [C], negatives [M, C].
template <class T>
T info_nce(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& negatives, T tau) {
  cdc_detail::check_nce_inputs(static_cast<double>(tau), negatives.rank() == 2 ? negatives.dim(0) : 0);
  const std::size_t c = a.size();
  require_same_shape(p.shape(), a.shape(), "info_nce positive");
  if (negatives.dim(1) != c) throw ShapeError("info_nce: negatives " + to_string(negatives.shape()));
  auto terms = cdc_detail::nce_terms(a.reshaped({1, c}), p.reshaped({1, c}), negatives, tau, nullptr);
  return terms.loss[0];
}

// Mean InfoNCE over kept patches; 0 when nothing is kept.
template <class T>
T cdc_loss(const PatchEmbeddingSet<T>& set, const Tensor<T>& negatives, T tau) {
  cdc_detail::check_nce_inputs(static_cast<double>(tau), negatives.rank() == 2 ? negatives.dim(0) : 0);
  cdc_detail::check_set_shapes(set.anchors, set.positives, negatives, set.size());
  const std::size_t kept = set.kept();
  if (kept == 0) return T{0};
  auto terms = cdc_detail::nce_terms(set.anchors, set.positives, negatives, tau, &set.keep_mask);
  T total{0};
  for (std::size_t i = 0; i < set.size(); ++i)
    if (set.keep_mask[i]) total += terms.loss[i];
  return total / static_cast<T>(kept);
}

template <class T>
T cdc_loss(const PatchEmbeddingSet<T>& set, const NegativeQueue<T>& queue, T tau) {
  return cdc_loss(set, queue.snapshot(), tau);
}

// Differentiable CDC loss. Only `anchors` [P, C] receives gradient; the
// positives, negatives and mask are data.
template <class T>
Var cdc_loss(Tape<T>& tape, Var anchors, const Tensor<T>& positives, const std::vector<bool>& keep_mask,
             const Tensor<T>& negatives, T tau) {
  cdc_detail::check_nce_inputs(static_cast<double>(tau), negatives.rank() == 2 ? negatives.dim(0) : 0);
  const Tensor<T>& a = tape.value(anchors);
  cdc_detail::check_set_shapes(a, positives, negatives, keep_mask.size());
  const std::size_t kept = static_cast<std::size_t>(std::count(keep_mask.begin(), keep_mask.end(), true));
  if (kept == 0) return tape.constant(Tensor<T>::scalar(T{0}));
  auto terms = cdc_detail::nce_terms(a, positives, negatives, tau, &keep_mask);
  T total{0};
  for (std::size_t i = 0; i < keep_mask.size(); ++i)
    if (keep_mask[i]) total += terms.loss[i];
  const T inv_k = T{1} / static_cast<T>(kept);
  return tape.custom(
      Tensor<T>::scalar(total * inv_k), {anchors},
      [anchors, positives, negatives, keep_mask, tau, inv_k, terms = std::move(terms)](Tape<T>& t,
                                                                                    const Tensor<T>& g) {
        // d loss_i / d a_i = (sum_k s_k v_k - p_i) / tau with s the softmax
        // weights over [p_i, n_1..n_M].
        const std::size_t p = positives.dim(0), c = positives.dim(1), m = negatives.dim(0);
        Tensor<T> da({p, c});
        ops::gemm_acc(terms.neg_weight.data(), negatives.data(), da.data(), p, m, c);
        const T s = g.item() * inv_k / tau;
        for (std::size_t i = 0; i < p; ++i) {
          T* row = da.data() + i * c;
          if (!keep_mask[i]) {
            std::fill_n(row, c, T{0});
            continue;
          }
          const T* pi = positives.data() + i * c;
          const T wp = terms.pos_weight[i] - T{1};
          for (std::size_t ch = 0; ch < c; ++ch) row[ch] = s * (row[ch] + wp * pi[ch]);
        }
        t.accumulate_grad(anchors, da);
      },
      "cdc_loss");
}

// ---------------------------------------------------------------------------
// EMA teacher.

template <class T>
void ema_update(const std::vector<ParamGroup<T>*>& teacher, const std::vector<const ParamGroup<T>*>& student,
                T momentum) {
  if (!(momentum >= T{0} && momentum <= T{1})) throw std::invalid_argument("EMA momentum outside [0, 1]");
  if (teacher.size() != student.size()) {
    throw ShapeError("ema_update: teacher has " + std::to_string(teacher.size()) + " groups, student " +
                     std::to_string(student.size()));
  }
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    require_same_shape(teacher[k]->value.shape(), student[k]->value.shape(), "ema_update");
  }
  const T keep = momentum, mix = T{1} - momentum;
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    T* t = teacher[k]->value.data();
    const T* s = student[k]->value.data();
    for (std::size_t i = 0; i < teacher[k]->value.size(); ++i) t[i] = keep * t[i] + mix * s[i];
  }
}

}  // namespace cma
