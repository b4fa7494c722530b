// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "cma/adapt.hpp"
#include "cma/gradcheck.hpp"

namespace cma {
namespace {

namespace fs = std::filesystem;
using Rng = std::mt19937_64;

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(s));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// ---- pseudo-labels ---------------------------------------------------------

TEST(Cbst, TopTwentyPercentOfOneClass) {
  // Ten pixels all predicting class 0 with confidences 0.1 .. 1.0.
  const std::size_t k = 11;
  Tensor<double> probs({1, 10, k});
  for (std::size_t i = 0; i < 10; ++i) {
    const double c = 0.1 * static_cast<double>(i + 1);
    probs[i * k] = c;
    for (std::size_t j = 1; j < k; ++j) probs[i * k + j] = (1.0 - c) / 10.0;
  }
  auto maps = cbst_select<double>({probs});
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(maps[0].labels[i], i >= 8 ? 0 : kIgnoreLabel) << i;
  EXPECT_DOUBLE_EQ(maps[0].retained_fraction, 0.2);
}

TEST(Cbst, TiesBrokenByPixelOrder) {
  Tensor<double> probs({1, 10, 2});
  for (std::size_t i = 0; i < 10; ++i) {
    probs[2 * i] = 0.8;
    probs[2 * i + 1] = 0.2;
  }
  auto maps = cbst_select<double>({probs});
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(maps[0].labels[i], i < 2 ? 0 : kIgnoreLabel);
}

TEST(Cbst, GlobalRetentionBoundAndArgmaxAgreement) {
  Rng rng(1);
  std::vector<Tensor<double>> probs;
  for (int n = 0; n < 5; ++n) probs.push_back(ops::softmax(random_tensor({9, 7, 4}, rng, -3, 3)));
  auto maps = cbst_select(probs);
  std::size_t kept = 0, total = 0;
  for (std::size_t n = 0; n < 5; ++n) {
    const auto am = argmax_labels(probs[n]);
    for (std::size_t i = 0; i < am.size(); ++i) {
      if (maps[n].labels[i] == kIgnoreLabel) continue;
      EXPECT_EQ(maps[n].labels[i], am[i]);
      ++kept;
    }
    total += am.size();
  }
  EXPECT_LE(kept, static_cast<std::size_t>(std::ceil(0.2 * total)) + 4);
  EXPECT_GE(kept, static_cast<std::size_t>(0.2 * total));
}

TEST(Cbst, EmptyClassAndEmptySet) {
  Tensor<double> probs({2, 2, 3});
  for (std::size_t i = 0; i < 4; ++i) probs[i * 3 + 1] = 1.0;
  auto maps = cbst_select<double>({probs});
  std::size_t kept = 0;
  for (auto l : maps[0].labels.values()) kept += l != kIgnoreLabel;
  EXPECT_EQ(kept, 1u);
  EXPECT_THROW(cbst_select<double>({}), std::invalid_argument);
}

TEST(Cbst, GenerationIsIdempotent) {
  SegModel<float> m(ModelConfig{8, 8, 4, 3}, 3);
  auto data = generate_dataset(40, 3, SpecRanges{32, 32, 4});
  std::vector<Tensor<float>> imgs;
  for (auto& s : data.samples) imgs.push_back(s.target_image);
  auto a = generate_pseudo_labels(m, imgs), b = generate_pseudo_labels(m, imgs);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a[i].labels, b[i].labels);
}

// ---- losses ----------------------------------------------------------------

TEST(SelfTraining, PeakedLogitsApproachZero) {
  Tensor<double> logits({2, 2, 3});
  Tensor<std::uint8_t> labels({2, 2}, {0, 1, 2, 1});
  for (std::size_t i = 0; i < 4; ++i) logits[i * 3 + labels[i]] = 40.0;
  EXPECT_LT(self_training_loss(logits, labels), 1e-15);
}

TEST(SelfTraining, UniformLogitsGiveLogK) {
  Tensor<double> logits({3, 3, 5}, 0.7);
  Tensor<std::uint8_t> labels({3, 3}, 2);
  labels[4] = kIgnoreLabel;
  EXPECT_NEAR(self_training_loss(logits, labels), std::log(5.0), 1e-15);
}

TEST(SelfTraining, MatchesLoopOracle) {
  Rng rng(2);
  auto logits = random_tensor({4, 4, 3}, rng, -4, 4);
  Tensor<std::uint8_t> labels({4, 4});
  std::uniform_int_distribution<int> u(0, 3);
  for (auto& l : labels.values()) {
    const int v = u(rng);
    l = v == 3 ? kIgnoreLabel : static_cast<std::uint8_t>(v);
  }
  double sum = 0;
  int n = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    double z = 0;
    for (int c = 0; c < 3; ++c) z += std::exp(logits[i * 3 + c]);
    sum += -std::log(std::exp(logits[i * 3 + labels[i]]) / z);
    ++n;
  }
  EXPECT_NEAR(self_training_loss(logits, labels), sum / n, 1e-6);
}

TEST(SelfTraining, ErrorsAndEmpty) {
  Tensor<double> logits({2, 2, 3});
  EXPECT_THROW(self_training_loss(logits, Tensor<std::uint8_t>({2, 2}, 3)), std::invalid_argument);
  EXPECT_THROW(self_training_loss(logits, Tensor<std::uint8_t>({2, 3}, 0)), ShapeError);
  EXPECT_EQ(self_training_loss(logits, Tensor<std::uint8_t>({2, 2}, kIgnoreLabel)), 0.0);
}

TEST(Entropy, ClosedForms) {
  EXPECT_NEAR(entropy_loss(Tensor<double>({2, 2, 4}, 1.5)), 1.0, 1e-15);
  Tensor<double> peaked({1, 1, 3}, {800.0, 0.0, 0.0});
  EXPECT_EQ(entropy_loss(peaked), 0.0);
  Tensor<double> p({1, 1, 3}, {std::log(0.7), std::log(0.2), std::log(0.1)});
  const double want = -(0.7 * std::log(0.7) + 0.2 * std::log(0.2) + 0.1 * std::log(0.1)) / std::log(3.0);
  EXPECT_NEAR(entropy_loss(p), want, 1e-14);
  EXPECT_NEAR(entropy_loss(p), 0.7298, 5e-5);
  EXPECT_THROW(entropy_loss(Tensor<double>({2, 1})), std::invalid_argument);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  ParamGroup<double> logits("logits", random_tensor({3, 4, 5}, rng, -2, 2));
  Tensor<std::uint8_t> labels({3, 4});
  for (std::size_t i = 0; i < 12; ++i) labels[i] = i % 4 == 3 ? kIgnoreLabel : static_cast<std::uint8_t>(i % 5);
  std::function<Var(Tape<double>&)> st = [&](Tape<double>& t) {
    return self_training_loss(t, t.param(logits), labels);
  };
  std::function<Var(Tape<double>&)> ent = [&](Tape<double>& t) { return entropy_loss(t, t.param(logits)); };
  GradCheckOptions opt;
  EXPECT_TRUE(finite_difference_check<double>(st, {&logits}, opt).passed);
  EXPECT_TRUE(finite_difference_check<double>(ent, {&logits}, opt).passed);
}

TEST(TotalLoss, Composition) {
  EXPECT_EQ(total_loss(1.0, 2.0, 3.0, 0.0, 0.0), 1.0);
  EXPECT_EQ(total_loss(1.0, 2.0, 3.0, 0.5, 0.5), 3.5);
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(c.lambda_ent, 0.01);
  EXPECT_DOUBLE_EQ(c.lambda_cdc, 1.0);
  EXPECT_THROW(total_loss(1.0, 1.0, 1.0, -0.1, 0.0), std::invalid_argument);
}

// ---- schedule and config ---------------------------------------------------

TEST(LrSchedule, Endpoints) {
  TrainConfig c;
  c.base_lr = 1e-3;
  EXPECT_DOUBLE_EQ(lr_schedule(c.warmup_lr_iters - 1, c), c.base_lr);
  EXPECT_NEAR(lr_schedule(c.iterations - 1, c), c.base_lr / (c.iterations - c.warmup_lr_iters), 1e-18);
  const std::size_t mid = (c.warmup_lr_iters + c.iterations) / 2;
  EXPECT_NEAR(lr_schedule(mid, c), c.base_lr / 2, 1e-3 * c.base_lr);
  EXPECT_THROW(lr_schedule(c.iterations, c), std::out_of_range);
  const double step = c.base_lr / c.warmup_lr_iters;
  EXPECT_LE(std::abs(lr_schedule(c.warmup_lr_iters, c) - lr_schedule(c.warmup_lr_iters - 1, c)), step);
  for (std::size_t t = 1; t < c.iterations; ++t) {
    ASSERT_LE(std::abs(lr_schedule(t, c) - lr_schedule(t - 1, c)), step + 1e-18) << t;
  }
}

TEST(TrainConfigTest, Defaults) {
  const TrainConfig c;
  EXPECT_EQ(c.iterations, 10000u);
  EXPECT_EQ(c.warmup_lr_iters, 1500u);
  EXPECT_EQ(c.stopgrad_iters, 2500u);
  EXPECT_DOUBLE_EQ(c.proj_lr_multiplier, 10.0);
  EXPECT_DOUBLE_EQ(c.ema_momentum, 0.9999);
  EXPECT_DOUBLE_EQ(c.tau, 0.3);
  EXPECT_EQ(c.grid, 7u);
  EXPECT_DOUBLE_EQ(c.conf_threshold, 0.2);
  EXPECT_EQ(c.queue_capacity, 65536u);
  EXPECT_DOUBLE_EQ(c.base_lr, 1e-3);
  EXPECT_DOUBLE_EQ(TrainConfig::segformer_preset().base_lr, 1e-5);
}

TEST(TrainConfigTest, ValidationAndJson) {
  TrainConfig c;
  c.stopgrad_iters = c.iterations;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  TrainConfig z;
  z.iterations = 0;
  EXPECT_NO_THROW(z.validate());
  auto j = to_json(TrainConfig{});
  j["iterations"] = 3000;
  j["stopgrad_iters"] = 750;
  j["warmup_lr_iters"] = 450;
  auto r = train_config_from_json(j);
  EXPECT_EQ(r.iterations, 3000u);
  j["learning_rate"] = 1.0;
  EXPECT_THROW(train_config_from_json(j), std::invalid_argument);
}

// ---- augmentation ----------------------------------------------------------

PairedSample rect_sample(std::size_t h, std::size_t w) {
  PairedSample s;
  s.target_image = Tensor<float>({h, w, 3});
  s.reference_image = Tensor<float>({h, w, 3});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = static_cast<float>(std::sin(0.3 * x + 0.17 * y + c));
        s.target_image[(y * w + x) * 3 + c] = v;
        s.reference_image[(y * w + x) * 3 + c] = v;
      }
  s.target_labels = Tensor<std::uint8_t>({h, w}, 1);
  s.flow = FlowField<float>::identity(h, w);
  return s;
}

TEST(Augment, SquareNoFlipIsIdentity) {
  auto s = generate_pair(sample_spec(3, SpecRanges{}));
  Tensor<std::uint8_t> pseudo({64, 64}, 2);
  auto inst = augment_pair(s, pseudo, AugmentParams{0, 0, false});
  EXPECT_EQ(inst.target, s.target_image);
  EXPECT_EQ(inst.reference, s.reference_image);
  EXPECT_EQ(inst.flow.flow, s.flow.flow);
  EXPECT_EQ(inst.flow.confidence, s.flow.confidence);
  EXPECT_EQ(inst.pseudo, pseudo);
}

TEST(Augment, FlipKeepsCorrespondences) {
  // A generated pair with a real shift: after flipping, warping the reference
  // by the new flow must reproduce the flipped target wherever it is valid.
  SceneSpec spec;
  spec.seed = 11;
  spec.affine = {1, 0, 5, 0, 1, 2};
  auto s = generate_pair(spec);
  Tensor<std::uint8_t> pseudo({64, 64}, 0);
  auto inst = augment_pair(s, pseudo, AugmentParams{0, 0, true});
  for (std::size_t i = 0; i < 64 * 64; ++i) EXPECT_FLOAT_EQ(inst.flow.flow[2 * i], -5.0f);
  auto warped = warp_features(inst.reference, inst.flow);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    if (warped.confidence[i] == 0.0f) continue;
    ++checked;
    for (std::size_t c = 0; c < 3; ++c) ASSERT_NEAR(warped.features[3 * i + c], inst.target[3 * i + c], 1e-6);
  }
  EXPECT_GT(checked, 64u * 50u);
}

TEST(Augment, CropOriginShiftsFlow) {
  auto s = rect_sample(64, 72);
  Tensor<std::uint8_t> pseudo({64, 72}, 0);
  auto inst = augment_pair(s, pseudo, AugmentParams{8, 0, false});
  ASSERT_EQ(inst.target.shape(), (Shape{64, 64, 3}));
  EXPECT_EQ(inst.reference.shape(), (Shape{64, 72, 3}));
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    EXPECT_EQ(inst.flow.flow[2 * i], 8.0f);
    EXPECT_EQ(inst.flow.flow[2 * i + 1], 0.0f);
  }
  auto warped = warp_features(inst.reference, inst.flow);
  EXPECT_EQ(warped.features, inst.target);
  // Flipped crop of a non-square image.
  auto flipped = augment_pair(s, pseudo, AugmentParams{5, 0, true});
  auto w2 = warp_features(flipped.reference, flipped.flow);
  EXPECT_EQ(w2.features, flipped.target);
  EXPECT_THROW(augment_pair(s, pseudo, AugmentParams{9, 0, false}), ShapeError);
}

// ---- model -----------------------------------------------------------------

TEST(Model, FeatureResolutionAndTapeEquality) {
  SegModel<double> m(ModelConfig{}, 1);
  Rng rng(4);
  auto img = random_tensor({1, 64, 64, 3}, rng, 0, 1);
  auto f = encode(m, img);
  EXPECT_EQ(f.shape(), (Shape{1, 8, 8, 64}));
  Tape<double> t;
  Var logits = forward(t, m, t.constant(img));
  EXPECT_EQ(t.value(logits), forward(m, img));
  EXPECT_EQ(t.value(logits).shape(), (Shape{1, 64, 64, 6}));
  EXPECT_THROW(encode(m, Tensor<double>({1, 60, 64, 3})), ShapeError);
}

TEST(Model, FullGradientCheck) {
  SegModel<double> m(ModelConfig{4, 6, 3, 3}, 2);
  Rng rng(5);
  for (auto* g : m.groups()) {
    if (g->value.rank() == 1) g->value = random_tensor(g->value.shape(), rng, -0.2, 0.2);
  }
  auto img = random_tensor({1, 8, 8, 3}, rng, 0, 1);
  Tensor<std::uint8_t> labels({1, 8, 8});
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(i % 3);
  ProjectionHead<double> head(6, 9);
  Tensor<double> conf({2, 2}, 0.8);
  std::vector<ParamGroup<double>*> groups = m.groups();
  for (auto* p : head.groups()) groups.push_back(p);
  Tensor<double> positives({4, kEmbedDim});
  for (std::size_t i = 0; i < 4; ++i) positives[i * kEmbedDim + i] = 1.0;
  Tensor<double> negs = ops::l2_normalize(random_tensor({6, kEmbedDim}, rng));
  std::function<Var(Tape<double>&)> build = [&](Tape<double>& t) {
    Var feat = encode(t, m, t.constant(img));
    Var logits = decode(t, m, feat);
    Var za = project(t, t.reshape(feat, {2, 2, 6}), head);
    Var anchors = aggregate_anchors(t, za, conf, 2);
    Var cdc = cdc_loss(t, anchors, positives, {true, true, false, true}, negs, 0.3);
    Var l = t.add(self_training_loss(t, logits, labels), t.scale(entropy_loss(t, logits), 0.01));
    return t.add(l, cdc);
  };
  auto r = finite_difference_check<double>(build, groups, GradCheckOptions{});
  EXPECT_TRUE(r.passed) << r.max_rel_error();
}

TEST(Model, CheckpointRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "cma_model_ckpt";
  fs::remove_all(dir);
  SegModel<float> m(ModelConfig{8, 16, 4, 3}, 7);
  save_model(dir, m);
  auto r = load_model<float>(dir);
  EXPECT_EQ(r.config.d_enc, 16u);
  for (std::size_t i = 0; i < m.groups().size(); ++i) EXPECT_EQ(r.groups()[i]->value, m.groups()[i]->value);
  fs::remove_all(dir);
}

// ---- adaptation loop -------------------------------------------------------

struct SmallRun {
  SpecRanges ranges{32, 32, 4};
  Dataset data = generate_dataset(500, 4, ranges);
  SegModel<float> source{ModelConfig{8, 16, 4, 3}, 3};
  std::vector<PseudoLabelMap> pseudo;
  TrainConfig cfg;

  SmallRun() {
    std::vector<Tensor<float>> imgs;
    for (auto& s : data.samples) imgs.push_back(s.target_image);
    pseudo = generate_pseudo_labels(source, imgs);
    cfg.iterations = 12;
    cfg.warmup_lr_iters = 3;
    cfg.stopgrad_iters = 6;
    cfg.queue_capacity = 64;
    cfg.grid = 3;
    cfg.ema_momentum = 0.9;
    cfg.batch_pairs = 2;
    cfg.seed = 5;
  }
};

template <class M>
bool params_equal(const M& a, const M& b) {
  const auto ga = a.groups(), gb = b.groups();
  for (std::size_t i = 0; i < ga.size(); ++i)
    if (ga[i]->value != gb[i]->value) return false;
  return true;
}

TEST(Adapt, ZeroIterationsReturnsSource) {
  SmallRun r;
  r.cfg.iterations = 0;
  auto st = adapt(r.source, r.data.samples, r.pseudo, r.cfg);
  EXPECT_TRUE(params_equal(st.student, r.source));
  EXPECT_TRUE(st.metrics.empty());
}

TEST(Adapt, DecoderFrozenEncoderMovesQueueFills) {
  SmallRun r;
  auto st = adapt(r.source, r.data.samples, r.pseudo, r.cfg);
  EXPECT_EQ(st.student.dec_w.value, r.source.dec_w.value);
  EXPECT_EQ(st.student.dec_b.value, r.source.dec_b.value);
  EXPECT_NE(st.student.enc_w1.value, r.source.enc_w1.value);
  ASSERT_EQ(st.metrics.size(), 12u);
  EXPECT_EQ(st.queue.size(), std::min<std::size_t>(64, 12 * 2 * 9));
  EXPECT_EQ(st.metrics[0].l_cdc, 0.0);
  EXPECT_GT(st.metrics[1].l_cdc, 0.0);
  // Teacher tracks the student but is not equal to it.
  EXPECT_NE(st.teacher.enc_w1.value, r.source.enc_w1.value);
  EXPECT_NE(st.teacher.enc_w1.value, st.student.enc_w1.value);
}

TEST(Adapt, StopGradIsolatesEncoder) {
  SmallRun r;
  TrainConfig a = r.cfg, b = r.cfg;
  a.lambda_cdc = 0.0;
  b.lambda_cdc = 5.0;
  AdaptOptions opt;
  opt.stop_at = r.cfg.stopgrad_iters;
  auto sa = init_adapt_state(r.source, a), sb = init_adapt_state(r.source, b);
  adapt_steps(sa, r.data.samples, r.pseudo, a, opt);
  adapt_steps(sb, r.data.samples, r.pseudo, b, opt);
  ASSERT_EQ(sa.iteration, r.cfg.stopgrad_iters);
  for (std::size_t i = 0; i < sa.student.encoder_groups().size(); ++i) {
    EXPECT_EQ(sa.student.encoder_groups()[i]->value, sb.student.encoder_groups()[i]->value);
  }
  const auto fresh = init_adapt_state(r.source, b);
  EXPECT_NE(sb.head.w2.value, fresh.head.w2.value);
  EXPECT_EQ(sa.head.w2.value, fresh.head.w2.value);
  // Past the stop-grad phase the contrastive term reaches the encoder.
  opt.stop_at = r.cfg.iterations;
  adapt_steps(sa, r.data.samples, r.pseudo, a, opt);
  adapt_steps(sb, r.data.samples, r.pseudo, b, opt);
  EXPECT_NE(sa.student.enc_w2.value, sb.student.enc_w2.value);
}

TEST(Adapt, NoLossesIsNoOp) {
  SmallRun r;
  r.cfg.lambda_cdc = 0.0;
  r.cfg.lambda_ent = 0.0;
  for (auto& p : r.pseudo) p.labels.fill(kIgnoreLabel);
  auto st = adapt(r.source, r.data.samples, r.pseudo, r.cfg);
  EXPECT_TRUE(params_equal(st.student, r.source));
  for (const auto& m : st.metrics) EXPECT_EQ(m.l_tot, 0.0);
}

std::string metrics_text(const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  for (const auto& r : rows) out << format_metrics_row(r) << "\n";
  return out.str();
}

TEST(Adapt, MetricsAreReproducible) {
  SmallRun r;
  auto a = adapt(r.source, r.data.samples, r.pseudo, r.cfg);
  auto b = adapt(r.source, r.data.samples, r.pseudo, r.cfg);
  EXPECT_EQ(metrics_text(a.metrics), metrics_text(b.metrics));
  EXPECT_TRUE(params_equal(a.student, b.student));
  r.cfg.seed = 6;
  auto c = adapt(r.source, r.data.samples, r.pseudo, r.cfg);
  EXPECT_NE(metrics_text(a.metrics), metrics_text(c.metrics));

  const fs::path p = fs::temp_directory_path() / "cma_metrics.csv";
  write_metrics_csv(p, a.metrics);
  std::ifstream in(p);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "iter,lr,L_st,L_ent,L_cdc,L_tot,kept_patch_fraction,queue_size");
  fs::remove(p);
}

TEST(Adapt, CheckpointResumeMatchesContinuousRun) {
  SmallRun r;
  const fs::path dir = fs::temp_directory_path() / "cma_adapt_ckpt";
  fs::remove_all(dir);
  auto full = adapt(r.source, r.data.samples, r.pseudo, r.cfg);
  AdaptOptions opt;
  opt.stop_at = 7;
  auto part = init_adapt_state(r.source, r.cfg);
  adapt_steps(part, r.data.samples, r.pseudo, r.cfg, opt);
  save_adapt_state(dir, part);
  auto resumed = load_adapt_state<float>(dir, r.cfg);
  EXPECT_EQ(resumed.iteration, 7u);
  EXPECT_EQ(resumed.queue.snapshot(), part.queue.snapshot());
  adapt_steps(resumed, r.data.samples, r.pseudo, r.cfg);
  EXPECT_TRUE(params_equal(resumed.student, full.student));
  EXPECT_TRUE(params_equal(resumed.teacher_head, full.teacher_head));
  EXPECT_EQ(resumed.queue.snapshot(), full.queue.snapshot());
  fs::remove_all(dir);
}

TEST(Adapt, NonFiniteInputAbortsWithDump) {
  SmallRun r;
  for (auto& s : r.data.samples) s.target_image[5] = std::numeric_limits<float>::quiet_NaN();
  AdaptOptions opt;
  opt.dump_dir = fs::temp_directory_path() / "cma_nan_dump";
  fs::remove_all(opt.dump_dir);
  EXPECT_THROW(adapt(r.source, r.data.samples, r.pseudo, r.cfg, opt), TrainingDiverged);
  EXPECT_TRUE(fs::exists(opt.dump_dir / "diagnostic.json"));
  EXPECT_TRUE(fs::exists(opt.dump_dir / "slot0_target.cmat"));
  fs::remove_all(opt.dump_dir);
}

TEST(Adapt, AblationSwitchesRun) {
  SmallRun r;
  for (int v = 0; v < 3; ++v) {
    TrainConfig c = r.cfg;
    c.use_warp = v != 0;
    c.use_confidence = v != 1;
    if (v == 2) c.grid = 1;
    auto st = adapt(r.source, r.data.samples, r.pseudo, c);
    EXPECT_EQ(st.metrics.size(), c.iterations);
    if (!c.use_confidence) {
      EXPECT_EQ(st.metrics.back().kept_patch_fraction, 1.0);
    }
  }
}

TEST(Pretrain, LearnsSourceLabels) {
  auto d = generate_dataset(900, 8, SpecRanges{32, 32, 4});
  std::vector<LabeledImage> src;
  for (auto& s : d.samples) src.push_back({s.reference_image, s.reference_labels});
  PretrainConfig pc;
  pc.iterations = 150;
  pc.warmup_iters = 10;
  pc.batch = 2;
  std::vector<double> losses;
  auto m = pretrain_source<float>(src, ModelConfig{8, 16, 4, 3}, pc, [&](std::size_t, double l) { losses.push_back(l); });
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += losses[i];
    last += losses[losses.size() - 1 - i];
  }
  EXPECT_LT(last, 0.8 * first);
  EXPECT_TRUE(m.dec_w.trainable);
}

}  // namespace
}  // namespace cma
