// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference check of every adaptation loss on a small synthetic pair,
// w.r.t. encoder, decoder and projection-head parameters.

#pragma once

#include <chrono>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cma/adapt.hpp"
#include "cma/cdc.hpp"
#include "cma/gradcheck.hpp"
#include "cma/model.hpp"
#include "cma/synthdata.hpp"
#include "cma/warp.hpp"

namespace cma {

struct GradientSuiteConfig {
  std::size_t image = 16;
  std::size_t num_classes = 4;
  std::size_t grid = 2;
  std::size_t d_enc = 16;
  std::size_t stride = 4;
  std::size_t negatives = 12;
  double tau = 0.3;
  double threshold = 0.2;
  std::uint64_t seed = 0;
  GradCheckOptions options;
};

struct GradientSuiteReport {
  std::vector<std::pair<std::string, GradCheckReport>> losses;  // L_st, L_ent, L_cdc, L_tot
  std::size_t kept_patches = 0;
  double seconds = 0.0;

  bool passed() const {
    for (const auto& [_, r] : losses)
      if (!r.passed) return false;
    return !losses.empty();
  }
};

inline GradientSuiteReport run_gradient_suite(const GradientSuiteConfig& c = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const PairedSample pair =
      generate_dataset(c.seed + 100, 1, SpecRanges{c.image, c.image, c.num_classes}).samples.front();
  SegModel<double> m(ModelConfig{c.stride, c.d_enc, c.num_classes, 3}, c.seed);
  std::mt19937_64 rng(c.seed + 7);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (auto* g : m.groups())
    if (g->value.rank() == 1)
      for (double& v : g->value.values()) v = u(rng);
  ProjectionHead<double> head(c.d_enc, c.seed + 1);
  const SegModel<double> teacher = m;
  const ProjectionHead<double> teacher_head = head;

  const std::size_t h = c.image / c.stride;
  const Shape is = pair.target_image.shape();
  const Tensor<double> target = pair.target_image.cast<double>().reshaped({1, is[0], is[1], is[2]});
  const Tensor<double> reference = pair.reference_image.cast<double>().reshaped({1, is[0], is[1], is[2]});
  const Tensor<double> rf = encode(teacher, reference).reshaped({h, h, c.d_enc});
  const WarpResult<double> warped = warp_features(rf, downsample_flow(pair.flow.cast<double>(), c.stride));
  const Tensor<double> positives =
      weighted_patch_embeddings(project(warped.features, teacher_head), warped.confidence, c.grid);
  std::vector<bool> keep;
  for (double v : patch_mean_confidence(warped.confidence, c.grid)) keep.push_back(v >= c.threshold);
  Tensor<double> negatives({c.negatives, kEmbedDim});
  std::normal_distribution<double> n01;
  for (double& v : negatives.values()) v = n01(rng);
  negatives = ops::l2_normalize(negatives);

  std::vector<ParamGroup<double>*> groups = m.groups();
  for (auto* g : head.groups()) groups.push_back(g);

  const auto st = [&](Tape<double>& t) {
    return self_training_loss(t, forward(t, m, t.constant(target)), pair.target_labels.reshaped({1, is[0], is[1]}));
  };
  const auto ent = [&](Tape<double>& t) { return entropy_loss(t, forward(t, m, t.constant(target))); };
  const auto cdc = [&](Tape<double>& t) {
    Var f = t.reshape(encode(t, m, t.constant(target)), {h, h, c.d_enc});
    Var anchors = aggregate_anchors(t, project(t, f, head), warped.confidence, c.grid);
    return cdc_loss(t, anchors, positives, keep, negatives, c.tau);
  };
  const TrainConfig defaults;
  const auto total = [&](Tape<double>& t) {
    Var feat = encode(t, m, t.constant(target));
    Var logits = decode(t, m, feat);
    Var l = t.add(self_training_loss(t, logits, pair.target_labels.reshaped({1, is[0], is[1]})),
                  t.scale(entropy_loss(t, logits), defaults.lambda_ent));
    Var anchors = aggregate_anchors(t, project(t, t.reshape(feat, {h, h, c.d_enc}), head), warped.confidence, c.grid);
    return t.add(l, t.scale(cdc_loss(t, anchors, positives, keep, negatives, c.tau), defaults.lambda_cdc));
  };

  GradientSuiteReport rep;
  rep.kept_patches = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
  const std::vector<std::pair<std::string, std::function<Var(Tape<double>&)>>> builders{
      {"L_st", st}, {"L_ent", ent}, {"L_cdc", cdc}, {"L_tot", total}};
  for (const auto& [name, b] : builders) rep.losses.emplace_back(name, finite_difference_check<double>(b, groups, c.options));
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace cma
