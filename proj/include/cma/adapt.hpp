// SPDX-License-Identifier: Apache-2.0
//
// Source pre-training, CBST pseudo-labels, self-training and entropy losses,
// and the adaptation loop with the contrastive term.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cma/autodiff.hpp"
#include "cma/cdc.hpp"
#include "cma/cmat.hpp"
#include "cma/model.hpp"
#include "cma/ops.hpp"
#include "cma/optim.hpp"
#include "cma/synthdata.hpp"
#include "cma/tensor.hpp"
#include "cma/warp.hpp"

namespace cma {

// ---------------------------------------------------------------------------
// Pseudo-labels.

struct PseudoLabelMap {
  Tensor<std::uint8_t> labels;  // [H, W], kIgnoreLabel where discarded
  double retained_fraction = 0.0;
};

inline constexpr double kCbstFraction = 0.2;

// Class-balanced selection over a whole set of probability maps [H, W, K]:
// per class, the ceil(fraction * n_c) most confident pixels predicted as that
// class are kept. Ties go to the earlier (image, pixel) position.
template <class T>
std::vector<PseudoLabelMap> cbst_select(const std::vector<Tensor<T>>& probs, double fraction = kCbstFraction) {
  if (probs.empty()) throw std::invalid_argument("pseudo-labels need at least one target image");
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("retention fraction outside [0, 1]");
  const std::size_t k = probs[0].shape().back();
  struct Cand {
    T p;
    std::uint32_t image;
    std::uint32_t pixel;
  };
  std::vector<std::vector<Cand>> per_class(k);
  std::vector<PseudoLabelMap> out(probs.size());
  for (std::size_t n = 0; n < probs.size(); ++n) {
    const auto& pr = probs[n];
    if (pr.rank() != 3 || pr.dim(2) != k) throw ShapeError("cbst_select: probability map " + to_string(pr.shape()));
    out[n].labels = Tensor<std::uint8_t>({pr.dim(0), pr.dim(1)}, kIgnoreLabel);
    const auto am = argmax_labels(pr);
    for (std::size_t i = 0; i < am.size(); ++i) {
      per_class[am[i]].push_back({pr[i * k + am[i]], static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(i)});
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    auto& v = per_class[c];
    const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(v.size())));
    std::stable_sort(v.begin(), v.end(), [](const Cand& a, const Cand& b) { return a.p > b.p; });
    for (std::size_t i = 0; i < keep; ++i) out[v[i].image].labels[v[i].pixel] = static_cast<std::uint8_t>(c);
  }
  for (auto& m : out) {
    const auto kept = std::count_if(m.labels.values().begin(), m.labels.values().end(),
                                    [](std::uint8_t l) { return l != kIgnoreLabel; });
    m.retained_fraction = static_cast<double>(kept) / static_cast<double>(m.labels.size());
  }
  return out;
}

template <class T>
Tensor<T> predict_probabilities(const SegModel<T>& m, const Tensor<float>& image) {
  const Shape s = image.shape();
  Tensor<T> logits = forward(m, image.template cast<T>().reshaped({1, s[0], s[1], s[2]}));
  return ops::softmax(logits).reshaped({s[0], s[1], m.config.num_classes});
}

// Created once from the source model before adaptation.
template <class T>
std::vector<PseudoLabelMap> generate_pseudo_labels(const SegModel<T>& source, const std::vector<Tensor<float>>& targets,
                                                   double fraction = kCbstFraction) {
  if (targets.empty()) throw std::invalid_argument("pseudo-labels need at least one target image");
  std::vector<Tensor<T>> probs;
  probs.reserve(targets.size());
  for (const auto& img : targets) probs.push_back(predict_probabilities(source, img));
  return cbst_select(probs, fraction);
}

// ---------------------------------------------------------------------------
// Losses on pixel logits [..., K].

namespace adapt_detail {

inline void check_labels(const Tensor<std::uint8_t>& labels, const Shape& logits, std::size_t k) {
  Shape lead = logits;
  lead.pop_back();
  if (labels.size() != numel(lead)) {
    throw ShapeError("self_training_loss: labels " + to_string(labels.shape()) + " vs logits " + to_string(logits));
  }
  for (std::uint8_t l : labels.values()) {
    if (l != kIgnoreLabel && l >= k) {
      throw std::invalid_argument("self_training_loss: label " + std::to_string(l) + " out of range for " +
                                  std::to_string(k) + " classes");
    }
  }
}

template <class T>
struct CeTerms {
  T loss;
  Tensor<T> grad;  // d loss / d logits
};

template <class T>
CeTerms<T> cross_entropy(const Tensor<T>& logits, const Tensor<std::uint8_t>& labels) {
  const std::size_t k = logits.shape().back(), n = leading(logits.shape());
  check_labels(labels, logits.shape(), k);
  const Tensor<T> logp = ops::log_softmax(logits);
  std::size_t valid = 0;
  for (std::uint8_t l : labels.values()) valid += l != kIgnoreLabel;
  CeTerms<T> out{T{0}, Tensor<T>(logits.shape())};
  if (valid == 0) return out;
  const T inv = T{1} / static_cast<T>(valid);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t l = labels[i];
    if (l == kIgnoreLabel) continue;
    const T* lp = logp.data() + i * k;
    out.loss -= lp[l];
    T* g = out.grad.data() + i * k;
    for (std::size_t c = 0; c < k; ++c) g[c] = std::exp(lp[c]) * inv;
    g[l] -= inv;
  }
  out.loss *= inv;
  return out;
}

template <class T>
CeTerms<T> normalized_entropy(const Tensor<T>& logits) {
  const std::size_t k = logits.shape().back(), n = leading(logits.shape());
  if (k < 2) throw std::invalid_argument("entropy_loss needs at least two classes");
  const Tensor<T> logp = ops::log_softmax(logits);
  const T norm = T{1} / (std::log(static_cast<T>(k)) * static_cast<T>(n));
  CeTerms<T> out{T{0}, Tensor<T>(logits.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    const T* lp = logp.data() + i * k;
    T h{0};
    for (std::size_t c = 0; c < k; ++c) {
      const T p = std::exp(lp[c]);
      if (p > T{0}) h -= p * lp[c];
    }
    out.loss += h;
    // dH/dz_c = -p_c (log p_c + H)
    T* g = out.grad.data() + i * k;
    for (std::size_t c = 0; c < k; ++c) {
      const T p = std::exp(lp[c]);
      g[c] = p > T{0} ? -p * (lp[c] + h) * norm : T{0};
    }
  }
  out.loss *= norm;
  return out;
}

}  // namespace adapt_detail

// Mean cross-entropy over non-ignore pixels; 0 if all are ignored.
template <class T>
T self_training_loss(const Tensor<T>& logits, const Tensor<std::uint8_t>& labels) {
  return adapt_detail::cross_entropy(logits, labels).loss;
}

template <class T>
Var self_training_loss(Tape<T>& t, Var logits, const Tensor<std::uint8_t>& labels) {
  auto ce = adapt_detail::cross_entropy(t.value(logits), labels);
  // Nothing labelled: a constant, so no gradient (and no decay step) follows.
  if (std::all_of(labels.values().begin(), labels.values().end(), [](std::uint8_t l) { return l == kIgnoreLabel; })) {
    return t.constant(Tensor<T>::scalar(T{0}));
  }
  return t.custom(Tensor<T>::scalar(ce.loss), {logits},
                  [logits, g = std::move(ce.grad)](Tape<T>& tp, const Tensor<T>& go) {
                    tp.accumulate_grad(logits, ops::scale(g, go.item()));
                  }, "self_training_loss");
}

// Mean over pixels of the entropy of softmax(logits), divided by log K.
template <class T>
T entropy_loss(const Tensor<T>& logits) {
  return adapt_detail::normalized_entropy(logits).loss;
}

template <class T>
Var entropy_loss(Tape<T>& t, Var logits) {
  auto e = adapt_detail::normalized_entropy(t.value(logits));
  return t.custom(Tensor<T>::scalar(e.loss), {logits},
                  [logits, g = std::move(e.grad)](Tape<T>& tp, const Tensor<T>& go) {
                    tp.accumulate_grad(logits, ops::scale(g, go.item()));
                  }, "entropy_loss");
}

template <class T>
T total_loss(T l_st, T l_ent, T l_cdc, T lambda_ent, T lambda_cdc) {
  if (!(lambda_ent >= T{0} && lambda_cdc >= T{0})) throw std::invalid_argument("loss weights must be non-negative");
  return l_st + lambda_ent * l_ent + lambda_cdc * l_cdc;
}

// ---------------------------------------------------------------------------
// Configuration.

struct TrainConfig {
  std::size_t iterations = 10000;
  std::size_t warmup_lr_iters = 1500;
  std::size_t stopgrad_iters = 2500;
  double base_lr = 1e-3;
  double proj_lr_multiplier = 10.0;
  double ema_momentum = 0.9999;
  double weight_decay = 0.01;
  double lambda_ent = 0.01;
  double lambda_cdc = 1.0;
  double tau = 0.3;
  std::size_t grid = 7;
  double conf_threshold = 0.2;
  std::size_t queue_capacity = 65536;
  std::size_t batch_pairs = 1;
  std::uint64_t seed = 0;
  // Ablation switches: identity correspondences instead of the flow, and
  // uniform patch weights without discarding.
  bool use_warp = true;
  bool use_confidence = true;

  // Learning rate used with the transformer backbone.
  static TrainConfig segformer_preset() {
    TrainConfig c;
    c.base_lr = 1e-5;
    return c;
  }

  void validate() const {
    if (iterations > 0 && (stopgrad_iters >= iterations || warmup_lr_iters >= iterations)) {
      throw std::invalid_argument("stop-grad and warm-up phases must be shorter than the run");
    }
    if (!(base_lr >= 0.0) || !(proj_lr_multiplier > 0.0)) throw std::invalid_argument("invalid learning rate");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw std::invalid_argument("EMA momentum outside [0, 1]");
    if (!(lambda_ent >= 0.0 && lambda_cdc >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
    if (batch_pairs == 0) throw std::invalid_argument("batch_pairs must be positive");
    CdcConfig{grid, conf_threshold, tau, queue_capacity}.validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},       {"warmup_lr_iters", c.warmup_lr_iters},
          {"stopgrad_iters", c.stopgrad_iters}, {"base_lr", c.base_lr},
          {"proj_lr_multiplier", c.proj_lr_multiplier}, {"ema_momentum", c.ema_momentum},
          {"weight_decay", c.weight_decay},   {"lambda_ent", c.lambda_ent},
          {"lambda_cdc", c.lambda_cdc},       {"tau", c.tau},
          {"grid", c.grid},                   {"conf_threshold", c.conf_threshold},
          {"queue_capacity", c.queue_capacity}, {"batch_pairs", c.batch_pairs},
          {"seed", c.seed},                   {"use_warp", c.use_warp},
          {"use_confidence", c.use_confidence}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  const nlohmann::json ref = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ref.contains(it.key())) throw std::invalid_argument("unknown training option '" + it.key() + "'");
  }
  c.iterations = j.value("iterations", c.iterations);
  c.warmup_lr_iters = j.value("warmup_lr_iters", c.warmup_lr_iters);
  c.stopgrad_iters = j.value("stopgrad_iters", c.stopgrad_iters);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.proj_lr_multiplier = j.value("proj_lr_multiplier", c.proj_lr_multiplier);
  c.ema_momentum = j.value("ema_momentum", c.ema_momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lambda_ent = j.value("lambda_ent", c.lambda_ent);
  c.lambda_cdc = j.value("lambda_cdc", c.lambda_cdc);
  c.tau = j.value("tau", c.tau);
  c.grid = j.value("grid", c.grid);
  c.conf_threshold = j.value("conf_threshold", c.conf_threshold);
  c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
  c.batch_pairs = j.value("batch_pairs", c.batch_pairs);
  c.seed = j.value("seed", c.seed);
  c.use_warp = j.value("use_warp", c.use_warp);
  c.use_confidence = j.value("use_confidence", c.use_confidence);
  c.validate();
  return c;
}

// Linear warm-up to base_lr, then linear decay to 0 at `iterations`.
inline double lr_schedule(std::size_t t, const TrainConfig& c) {
  if (t >= c.iterations) {
    throw std::out_of_range("lr_schedule: iteration " + std::to_string(t) + " outside [0, " +
                            std::to_string(c.iterations) + ")");
  }
  if (t < c.warmup_lr_iters) {
    return c.base_lr * static_cast<double>(t + 1) / static_cast<double>(c.warmup_lr_iters);
  }
  return c.base_lr * static_cast<double>(c.iterations - t) / static_cast<double>(c.iterations - c.warmup_lr_iters);
}

// ---------------------------------------------------------------------------
// Augmentation: square crop of side min(H, W) plus horizontal flip. The
// reference stays full size; a flip mirrors it together with the target.

struct AugmentParams {
  std::size_t ox = 0, oy = 0;
  bool flip = false;
};

struct TrainInstance {
  Tensor<float> target;          // [L, L, 3]
  Tensor<std::uint8_t> pseudo;   // [L, L]
  FlowField<float> flow;         // [L, L] into `reference`
  Tensor<float> reference;       // [Hr, Wr, 3]
};

inline AugmentParams draw_augment(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  const std::size_t side = std::min(h, w);
  AugmentParams p;
  p.ox = std::uniform_int_distribution<std::size_t>(0, w - side)(rng);
  p.oy = std::uniform_int_distribution<std::size_t>(0, h - side)(rng);
  p.flip = std::bernoulli_distribution(0.5)(rng);
  return p;
}

namespace adapt_detail {

template <class T>
Tensor<T> flip_horizontal(const Tensor<T>& img) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.rank() == 3 ? img.dim(2) : 1;
  Tensor<T> out(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      std::copy_n(img.data() + (y * w + x) * c, c, out.data() + (y * w + (w - 1 - x)) * c);
  return out;
}

template <class T>
Tensor<T> crop(const Tensor<T>& img, std::size_t ox, std::size_t oy, std::size_t side) {
  const std::size_t w = img.dim(1), c = img.rank() == 3 ? img.dim(2) : 1;
  Shape s = img.shape();
  s[0] = s[1] = side;
  Tensor<T> out(s);
  for (std::size_t y = 0; y < side; ++y)
    std::copy_n(img.data() + ((oy + y) * w + ox) * c, side * c, out.data() + y * side * c);
  return out;
}

}  // namespace adapt_detail

inline TrainInstance augment_pair(const PairedSample& s, const Tensor<std::uint8_t>& pseudo, const AugmentParams& p) {
  using adapt_detail::crop;
  using adapt_detail::flip_horizontal;
  const std::size_t h = s.target_image.dim(0), w = s.target_image.dim(1), side = std::min(h, w);
  if (p.ox + side > w || p.oy + side > h) throw ShapeError("augment_pair: crop window exceeds the image");
  require_same_shape(pseudo.shape(), Shape{h, w}, "augment_pair pseudo-labels");
  s.flow.validate();
  TrainInstance out;
  out.target = crop(s.target_image, p.ox, p.oy, side);
  out.pseudo = crop(pseudo, p.ox, p.oy, side);
  out.flow = {crop(s.flow.flow, p.ox, p.oy, side), crop(s.flow.confidence, p.ox, p.oy, side)};
  // Crop-local x maps to reference x + ox + dx.
  for (std::size_t i = 0; i < side * side; ++i) {
    out.flow.flow[2 * i] += static_cast<float>(p.ox);
    out.flow.flow[2 * i + 1] += static_cast<float>(p.oy);
  }
  out.reference = s.reference_image;
  if (p.flip) {
    const float wr = static_cast<float>(s.reference_image.dim(1));
    out.target = flip_horizontal(out.target);
    out.pseudo = flip_horizontal(out.pseudo);
    out.flow.confidence = flip_horizontal(out.flow.confidence);
    out.flow.flow = flip_horizontal(out.flow.flow);
    out.reference = flip_horizontal(out.reference);
    // x' = L-1-x looks up Wr-1-(x + dx) in the mirrored reference.
    for (std::size_t i = 0; i < side * side; ++i) {
      out.flow.flow[2 * i] = (wr - static_cast<float>(side)) - out.flow.flow[2 * i];
    }
  }
  return out;
}

// RNG for iteration `iter`, batch slot `slot`.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t iter, std::uint64_t slot, std::uint32_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iter), static_cast<std::uint32_t>(iter >> 32),
                    static_cast<std::uint32_t>(slot), salt};
  return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Source pre-training: supervised cross-entropy on normal-condition images.

struct PretrainConfig {
  std::size_t iterations = 2000;
  std::size_t warmup_iters = 200;
  double lr = 3e-3;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
};

struct LabeledImage {
  Tensor<float> image;           // [H, W, 3]
  Tensor<std::uint8_t> labels;   // [H, W]
};

template <class T>
SegModel<T> pretrain_source(const std::vector<LabeledImage>& data, const ModelConfig& mc, const PretrainConfig& pc,
                            std::function<void(std::size_t, double)> on_step = {}) {
  if (data.empty()) throw std::invalid_argument("source pre-training needs data");
  SegModel<T> m(mc, pc.seed ^ 0x5EEDull);
  AdamWState<T> opt;
  TrainConfig sched;
  sched.iterations = pc.iterations;
  sched.warmup_lr_iters = pc.warmup_iters;
  sched.base_lr = pc.lr;
  const std::size_t h = data[0].image.dim(0), w = data[0].image.dim(1), side = std::min(h, w);
  for (std::size_t it = 0; it < pc.iterations; ++it) {
    auto rng = stream_rng(pc.seed, it, 0, 0x50u);
    Tensor<T> batch({pc.batch, side, side, 3});
    Tensor<std::uint8_t> labels({pc.batch, side, side});
    for (std::size_t b = 0; b < pc.batch; ++b) {
      const auto& d = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
      const AugmentParams ap = draw_augment(h, w, rng);
      Tensor<float> img = adapt_detail::crop(d.image, ap.ox, ap.oy, side);
      Tensor<std::uint8_t> lab = adapt_detail::crop(d.labels, ap.ox, ap.oy, side);
      if (ap.flip) {
        img = adapt_detail::flip_horizontal(img);
        lab = adapt_detail::flip_horizontal(lab);
      }
      for (std::size_t i = 0; i < img.size(); ++i) batch[b * img.size() + i] = static_cast<T>(img[i]);
      std::copy_n(lab.data(), lab.size(), labels.data() + b * lab.size());
    }
    Tape<T> tape;
    Var loss = self_training_loss(tape, forward(tape, m, tape.constant(std::move(batch))), labels);
    if (on_step) on_step(it, static_cast<double>(tape.value(loss).item()));
    tape.backward(loss);
    adamw_step(opt, m.groups(), static_cast<T>(lr_schedule(it, sched)));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Adaptation.

struct MetricsRow {
  std::size_t iter;
  double lr, l_st, l_ent, l_cdc, l_tot, kept_patch_fraction;
  std::size_t queue_size;
};

inline constexpr const char* kMetricsHeader = "iter,lr,L_st,L_ent,L_cdc,L_tot,kept_patch_fraction,queue_size";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu", r.iter, r.lr, r.l_st, r.l_ent, r.l_cdc,
                r.l_tot, r.kept_patch_fraction, r.queue_size);
  return buf;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  out << kMetricsHeader << "\n";
  for (const auto& r : rows) out << format_metrics_row(r) << "\n";
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

// Raised when a loss or update becomes non-finite; the offending batch has
// been written to `dump_dir`.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& msg, std::filesystem::path dump)
      : NumericError(msg), dump_dir(std::move(dump)) {}
  std::filesystem::path dump_dir;
};

template <class T>
struct AdaptState {
  SegModel<T> student;
  ProjectionHead<T> head;
  SegModel<T> teacher;
  ProjectionHead<T> teacher_head;
  NegativeQueue<T> queue;
  AdamWState<T> opt;
  std::size_t iteration = 0;
  std::vector<MetricsRow> metrics;

  std::vector<ParamGroup<T>*> optimized_groups() {
    auto g = student.groups();
    for (auto* p : head.groups()) g.push_back(p);
    return g;
  }

  std::vector<ParamGroup<T>*> teacher_groups() {
    auto g = teacher.encoder_groups();
    for (auto* p : teacher_head.groups()) g.push_back(p);
    return g;
  }

  std::vector<const ParamGroup<T>*> student_ema_sources() const {
    auto g = student.encoder_groups();
    for (const auto* p : head.groups()) g.push_back(p);
    return g;
  }
};

template <class T>
AdaptState<T> init_adapt_state(const SegModel<T>& source, const TrainConfig& cfg) {
  cfg.validate();
  AdaptState<T> s;
  s.student = source;
  s.student.set_decoder_trainable(false);
  s.student.set_encoder_trainable(true);
  s.head = ProjectionHead<T>(source.config.d_enc, cfg.seed ^ 0x9E37ull, "proj");
  s.head.set_lr_multiplier(static_cast<T>(cfg.proj_lr_multiplier));
  s.teacher = source;
  for (auto* g : s.teacher.groups()) {
    g->name = "ema." + g->name;
    g->trainable = false;
  }
  s.teacher_head = s.head;
  for (auto* g : s.teacher_head.groups()) {
    g->name = "ema." + g->name;
    g->trainable = false;
  }
  s.queue = NegativeQueue<T>(cfg.queue_capacity, kEmbedDim);
  s.opt.weight_decay = static_cast<T>(cfg.weight_decay);
  return s;
}

// Checkpoint: every parameter group, AdamW moments, queue and iteration.
template <class T>
void save_adapt_state(const std::filesystem::path& dir, const AdaptState<T>& s) {
  CheckpointWriter w(dir);
  std::vector<const ParamGroup<T>*> all;
  for (const auto* g : s.student.groups()) all.push_back(g);
  for (const auto* g : s.head.groups()) all.push_back(g);
  for (const auto* g : s.teacher.groups()) all.push_back(g);
  for (const auto* g : s.teacher_head.groups()) all.push_back(g);
  save_groups(w, all);
  for (std::size_t i = 0; i < s.opt.m.size(); ++i) {
    w.add("adamw.m." + std::to_string(i), s.opt.m[i]);
    w.add("adamw.v." + std::to_string(i), s.opt.v[i]);
  }
  s.queue.save(dir / "queue");
  w.set("adamw.step", s.opt.step);
  w.set("adamw.groups", s.opt.m.size());
  w.set("iteration", s.iteration);
  w.set("stride", s.student.config.stride);
  w.set("d_enc", s.student.config.d_enc);
  w.set("num_classes", s.student.config.num_classes);
  w.finish();
}

template <class T>
AdaptState<T> load_adapt_state(const std::filesystem::path& dir, const TrainConfig& cfg) {
  CheckpointReader r(dir);
  ModelConfig mc;
  mc.stride = r.meta().at("stride").get<std::size_t>();
  mc.d_enc = r.meta().at("d_enc").get<std::size_t>();
  mc.num_classes = r.meta().at("num_classes").get<std::size_t>();
  AdaptState<T> s = init_adapt_state(SegModel<T>(mc, 0), cfg);
  std::vector<ParamGroup<T>*> all = s.student.groups();
  for (auto* g : s.head.groups()) all.push_back(g);
  for (auto* g : s.teacher.groups()) all.push_back(g);
  for (auto* g : s.teacher_head.groups()) all.push_back(g);
  load_groups(r, all);
  const std::size_t ng = r.meta().at("adamw.groups").get<std::size_t>();
  for (std::size_t i = 0; i < ng; ++i) {
    s.opt.m.push_back(r.get<T>("adamw.m." + std::to_string(i)));
    s.opt.v.push_back(r.get<T>("adamw.v." + std::to_string(i)));
  }
  s.opt.step = r.meta().at("adamw.step").get<std::uint64_t>();
  s.queue = NegativeQueue<T>::load(dir / "queue");
  s.iteration = r.meta().at("iteration").get<std::size_t>();
  return s;
}

struct AdaptOptions {
  std::filesystem::path dump_dir = "nan_dump";
  // Pause before this iteration (the schedule still spans cfg.iterations).
  std::size_t stop_at = std::numeric_limits<std::size_t>::max();
  std::function<void(const MetricsRow&)> on_iteration;
};

namespace adapt_detail {

inline void dump_batch(const std::filesystem::path& dir, std::size_t iter, const std::vector<TrainInstance>& batch,
                       const std::vector<std::size_t>& indices, const std::string& what) {
  std::filesystem::create_directories(dir);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::string p = "slot" + std::to_string(b) + "_";
    write_cmat(dir / (p + "target.cmat"), batch[b].target);
    write_cmat(dir / (p + "reference.cmat"), batch[b].reference);
    write_cmat(dir / (p + "pseudo.cmat"), batch[b].pseudo);
    write_cmat(dir / (p + "flow.cmat"), batch[b].flow.flow);
    write_cmat(dir / (p + "conf.cmat"), batch[b].flow.confidence);
  }
  std::ofstream(dir / "diagnostic.json") << nlohmann::json{{"iteration", iter}, {"sample_indices", indices},
                                                           {"error", what}}
                                                .dump(2)
                                         << "\n";
}

template <class T>
Tensor<T> as_batch1(const Tensor<float>& img) {
  const Shape s = img.shape();
  return img.template cast<T>().reshaped({1, s[0], s[1], s[2]});
}

}  // namespace adapt_detail

// Runs iterations [state.iteration, min(cfg.iterations, opt.stop_at)).
template <class T>
void adapt_steps(AdaptState<T>& st, const std::vector<PairedSample>& data, const std::vector<PseudoLabelMap>& pseudo,
                 const TrainConfig& cfg, const AdaptOptions& opt = {}) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("adaptation needs at least one pair");
  if (pseudo.size() != data.size()) throw std::invalid_argument("one pseudo-label map per pair is required");
  const std::size_t s = st.student.config.stride, d = st.student.config.d_enc, g = cfg.grid;
  const T tau = static_cast<T>(cfg.tau);
  const std::size_t end = std::min(cfg.iterations, opt.stop_at);
  for (; st.iteration < end; ++st.iteration) {
    const std::size_t it = st.iteration;
    const double lr = lr_schedule(it, cfg);
    std::vector<TrainInstance> batch;
    std::vector<std::size_t> indices;
    for (std::size_t b = 0; b < cfg.batch_pairs; ++b) {
      auto rng = stream_rng(cfg.seed, it, b, 0xADu);
      const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng);
      const auto& smp = data[idx];
      indices.push_back(idx);
      batch.push_back(augment_pair(smp, pseudo[idx].labels, draw_augment(smp.height(), smp.width(), rng)));
    }
    try {
      Tape<T> tape;
      Var st_sum{}, ent_sum{}, cdc_sum{};
      double l_st = 0, l_ent = 0, l_cdc = 0, kept = 0;
      std::vector<Tensor<T>> pending;
      const bool cdc_active = !st.queue.empty();
      const Tensor<T> negatives = cdc_active ? st.queue.snapshot() : Tensor<T>{};
      const auto add_to = [&tape](Var& acc, Var v) { acc = acc.valid() ? tape.add(acc, v) : v; };
      for (const TrainInstance& inst : batch) {
        const std::size_t side = inst.target.dim(0), h = side / s, w = side / s;
        Var x = tape.constant(adapt_detail::as_batch1<T>(inst.target));
        Var feat = encode(tape, st.student, x);
        Var logits = decode(tape, st.student, feat);
        Var ls = self_training_loss(tape, logits, inst.pseudo);
        Var le = entropy_loss(tape, logits);
        l_st += static_cast<double>(tape.value(ls).item());
        l_ent += static_cast<double>(tape.value(le).item());
        add_to(st_sum, ls);
        add_to(ent_sum, le);

        // Teacher branch, recorded nowhere.
        const Tensor<T> tf = encode(st.teacher, adapt_detail::as_batch1<T>(inst.target)).reshaped({h, w, d});
        const Tensor<T> rf_full = encode(st.teacher, adapt_detail::as_batch1<T>(inst.reference));
        const Tensor<T> rf = rf_full.reshaped({rf_full.dim(1), rf_full.dim(2), d});
        FlowField<T> flow = cfg.use_warp ? downsample_flow(inst.flow.template cast<T>(), s)
                                         : FlowField<T>::identity(h, w);
        WarpResult<T> warped = warp_features(rf, flow);
        const Tensor<T> conf = cfg.use_confidence ? warped.confidence : Tensor<T>({h, w}, T{1});
        pending.push_back(aggregate_negatives(project(tf, st.teacher_head), g));

        std::vector<bool> keep;
        for (T c : patch_mean_confidence(conf, g)) keep.push_back(!cfg.use_confidence || c >= static_cast<T>(cfg.conf_threshold));
        kept += static_cast<double>(std::count(keep.begin(), keep.end(), true)) / static_cast<double>(keep.size());
        if (!cdc_active) continue;
        const Tensor<T> positives = weighted_patch_embeddings(project(warped.features, st.teacher_head), conf, g);
        Var f = tape.reshape(it < cfg.stopgrad_iters ? tape.detach(feat) : feat, {h, w, d});
        Var anchors = aggregate_anchors(tape, project(tape, f, st.head), conf, g);
        Var lc = cdc_loss(tape, anchors, positives, keep, negatives, tau);
        l_cdc += static_cast<double>(tape.value(lc).item());
        add_to(cdc_sum, lc);
      }
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      l_st *= inv_b;
      l_ent *= inv_b;
      l_cdc *= inv_b;
      kept *= inv_b;
      const double l_tot = total_loss(l_st, l_ent, l_cdc, cfg.lambda_ent, cfg.lambda_cdc);
      if (!std::isfinite(l_tot)) throw NumericError("non-finite total loss");

      // Zero-weight terms stay out of the graph.
      const T ib = static_cast<T>(inv_b);
      Var total = tape.scale(st_sum, ib);
      if (cfg.lambda_ent > 0) total = tape.add(total, tape.scale(ent_sum, static_cast<T>(cfg.lambda_ent) * ib));
      if (cfg.lambda_cdc > 0 && cdc_sum.valid()) {
        total = tape.add(total, tape.scale(cdc_sum, static_cast<T>(cfg.lambda_cdc) * ib));
      }
      if (tape.requires_grad(total)) {
        tape.backward(total);
        auto groups = st.optimized_groups();
        if (std::any_of(groups.begin(), groups.end(), [](auto* p) { return p->has_grad; })) {
          adamw_step(st.opt, groups, static_cast<T>(lr));
        }
      }
      ema_update(st.teacher_groups(), st.student_ema_sources(), static_cast<T>(cfg.ema_momentum));
      for (const auto& n : pending) st.queue.enqueue(n);
      MetricsRow row{it, lr, l_st, l_ent, l_cdc, l_tot, kept, st.queue.size()};
      st.metrics.push_back(row);
      if (opt.on_iteration) opt.on_iteration(row);
    } catch (const NumericError& e) {
      adapt_detail::dump_batch(opt.dump_dir, it, batch, indices, e.what());
      throw TrainingDiverged("iteration " + std::to_string(it) + ": " + e.what() + " (batch dumped to " +
                                 opt.dump_dir.string() + ")",
                             opt.dump_dir);
    }
  }
}

template <class T>
AdaptState<T> adapt(const SegModel<T>& source, const std::vector<PairedSample>& data,
                    const std::vector<PseudoLabelMap>& pseudo, const TrainConfig& cfg, const AdaptOptions& opt = {}) {
  AdaptState<T> st = init_adapt_state(source, cfg);
  adapt_steps(st, data, pseudo, cfg, opt);
  return st;
}

}  // namespace cma
