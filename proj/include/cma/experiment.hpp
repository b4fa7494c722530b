// SPDX-License-Identifier: Apache-2.0
//
// End-to-end driver: generate data, pre-train on the normal condition,
// pseudo-label, adapt the ablation variants and evaluate on held-out pairs.

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cma/adapt.hpp"
#include "cma/eval.hpp"
#include "cma/model.hpp"
#include "cma/synthdata.hpp"

namespace cma {

inline constexpr const char* kCodeVersion = "0.1.0";

inline const std::vector<std::string>& known_variants() {
  static const std::vector<std::string> v{"full", "no_cdc", "no_warp", "no_conf", "global_pool"};
  return v;
}

struct ExperimentConfig {
  SpecRanges scene;
  std::size_t num_pairs = 200;
  std::size_t val_pairs = 50;  // the last val_pairs pairs are held out
  std::uint64_t data_seed = 1000;
  std::size_t source_images = 200;
  std::uint64_t source_seed = 900000;
  ModelConfig model;
  PretrainConfig pretrain;
  TrainConfig train = desk_train_config();
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> variants = known_variants();

  // Adaptation schedule used for the synthetic benchmark.
  static TrainConfig desk_train_config() {
    TrainConfig c;
    c.iterations = 600;
    c.warmup_lr_iters = 90;
    c.stopgrad_iters = 150;
    c.ema_momentum = 0.998;
    c.queue_capacity = 2048;
    c.batch_pairs = 2;
    return c;
  }

  void validate() const {
    if (num_pairs == 0 || val_pairs == 0 || val_pairs >= num_pairs) {
      throw std::invalid_argument("need 0 < val_pairs < num_pairs");
    }
    if (source_images == 0) throw std::invalid_argument("source_images must be positive");
    if (scene.num_classes != model.num_classes) throw std::invalid_argument("scene and model class counts differ");
    if (seeds.empty()) throw std::invalid_argument("at least one seed is required");
    for (const auto& v : variants) {
      if (std::find(known_variants().begin(), known_variants().end(), v) == known_variants().end()) {
        throw std::invalid_argument("unknown variant '" + v + "'");
      }
    }
    model.validate();
    train.validate();
  }
};

// Training configuration of one ablation variant.
inline TrainConfig variant_config(const std::string& name, TrainConfig c) {
  if (name == "full") return c;
  if (name == "no_cdc") {
    c.lambda_cdc = 0.0;
  } else if (name == "no_warp") {
    c.use_warp = false;
  } else if (name == "no_conf") {
    c.use_confidence = false;
  } else if (name == "global_pool") {
    c.grid = 1;
    c.use_warp = false;
    c.use_confidence = false;
  } else {
    throw std::invalid_argument("unknown variant '" + name + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// JSON.

namespace experiment_detail {

inline void reject_unknown(const nlohmann::json& j, const nlohmann::json& ref, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ref.contains(it.key())) throw std::invalid_argument("unknown " + where + " key '" + it.key() + "'");
  }
}

}  // namespace experiment_detail

inline nlohmann::json to_json(const SpecRanges& r) {
  return {{"height", r.height},
          {"width", r.width},
          {"num_classes", r.num_classes},
          {"min_regions", r.min_regions},
          {"max_regions", r.max_regions},
          {"max_shift_x", r.max_shift_x},
          {"max_shift_y", r.max_shift_y},
          {"max_rotation_deg", r.max_rotation_deg},
          {"min_scale", r.min_scale},
          {"max_scale", r.max_scale},
          {"brightness_min", r.brightness_min},
          {"brightness_max", r.brightness_max},
          {"gamma_min", r.gamma_min},
          {"gamma_max", r.gamma_max},
          {"noise_min", r.noise_min},
          {"noise_max", r.noise_max},
          {"fog_min", r.fog_min},
          {"fog_max", r.fog_max},
          {"max_dynamic_objects", r.max_dynamic_objects}};
}

inline SpecRanges spec_ranges_from_json(const nlohmann::json& j, SpecRanges r = {}) {
  experiment_detail::reject_unknown(j, to_json(r), "scene");
  r.height = j.value("height", r.height);
  r.width = j.value("width", r.width);
  r.num_classes = j.value("num_classes", r.num_classes);
  r.min_regions = j.value("min_regions", r.min_regions);
  r.max_regions = j.value("max_regions", r.max_regions);
  r.max_shift_x = j.value("max_shift_x", r.max_shift_x);
  r.max_shift_y = j.value("max_shift_y", r.max_shift_y);
  r.max_rotation_deg = j.value("max_rotation_deg", r.max_rotation_deg);
  r.min_scale = j.value("min_scale", r.min_scale);
  r.max_scale = j.value("max_scale", r.max_scale);
  r.brightness_min = j.value("brightness_min", r.brightness_min);
  r.brightness_max = j.value("brightness_max", r.brightness_max);
  r.gamma_min = j.value("gamma_min", r.gamma_min);
  r.gamma_max = j.value("gamma_max", r.gamma_max);
  r.noise_min = j.value("noise_min", r.noise_min);
  r.noise_max = j.value("noise_max", r.noise_max);
  r.fog_min = j.value("fog_min", r.fog_min);
  r.fog_max = j.value("fog_max", r.fog_max);
  r.max_dynamic_objects = j.value("max_dynamic_objects", r.max_dynamic_objects);
  return r;
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"stride", m.stride}, {"d_enc", m.d_enc}, {"num_classes", m.num_classes}, {"in_channels", m.in_channels}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig m = {}) {
  experiment_detail::reject_unknown(j, to_json(m), "model");
  m.stride = j.value("stride", m.stride);
  m.d_enc = j.value("d_enc", m.d_enc);
  m.num_classes = j.value("num_classes", m.num_classes);
  m.in_channels = j.value("in_channels", m.in_channels);
  m.validate();
  return m;
}

inline nlohmann::json to_json(const PretrainConfig& p) {
  return {{"iterations", p.iterations}, {"warmup_iters", p.warmup_iters}, {"lr", p.lr}, {"batch", p.batch},
          {"seed", p.seed}};
}

inline PretrainConfig pretrain_config_from_json(const nlohmann::json& j, PretrainConfig p = {}) {
  experiment_detail::reject_unknown(j, to_json(p), "pretrain");
  p.iterations = j.value("iterations", p.iterations);
  p.warmup_iters = j.value("warmup_iters", p.warmup_iters);
  p.lr = j.value("lr", p.lr);
  p.batch = j.value("batch", p.batch);
  p.seed = j.value("seed", p.seed);
  return p;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"scene", to_json(c.scene)},
          {"num_pairs", c.num_pairs},
          {"val_pairs", c.val_pairs},
          {"data_seed", c.data_seed},
          {"source_images", c.source_images},
          {"source_seed", c.source_seed},
          {"model", to_json(c.model)},
          {"pretrain", to_json(c.pretrain)},
          {"train", to_json(c.train)},
          {"seeds", c.seeds},
          {"variants", c.variants}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig c = {}) {
  experiment_detail::reject_unknown(j, to_json(c), "experiment");
  if (j.contains("scene")) c.scene = spec_ranges_from_json(j["scene"], c.scene);
  c.num_pairs = j.value("num_pairs", c.num_pairs);
  c.val_pairs = j.value("val_pairs", c.val_pairs);
  c.data_seed = j.value("data_seed", c.data_seed);
  c.source_images = j.value("source_images", c.source_images);
  c.source_seed = j.value("source_seed", c.source_seed);
  if (j.contains("model")) c.model = model_config_from_json(j["model"], c.model);
  if (j.contains("pretrain")) c.pretrain = pretrain_config_from_json(j["pretrain"], c.pretrain);
  if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
  if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  if (j.contains("variants")) c.variants = j["variants"].get<std::vector<std::string>>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Stages.

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage_name, std::uint64_t seed_value, const std::string& what)
      : std::runtime_error("stage '" + stage_name + "' failed for seed " + std::to_string(seed_value) + ": " + what),
        stage(std::move(stage_name)),
        seed(seed_value) {}
  std::string stage;
  std::uint64_t seed;
};

template <class F>
auto run_stage(const std::string& stage, std::uint64_t seed, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, seed, e.what());
  }
}

struct ExperimentData {
  Dataset target;                 // train pairs followed by val pairs
  std::vector<PairedSample> train, val;
  std::vector<LabeledImage> source;
  std::uint64_t target_hash = 0, source_hash = 0;
};

inline ExperimentData make_experiment_data(const ExperimentConfig& c) {
  ExperimentData d;
  d.target = generate_dataset(c.data_seed, c.num_pairs, c.scene);
  const std::size_t n_train = c.num_pairs - c.val_pairs;
  d.train.assign(d.target.samples.begin(), d.target.samples.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.val.assign(d.target.samples.begin() + static_cast<std::ptrdiff_t>(n_train), d.target.samples.end());
  Dataset src = generate_dataset(c.source_seed, c.source_images, c.scene);
  for (auto& s : src.samples) d.source.push_back({std::move(s.reference_image), std::move(s.reference_labels)});
  d.target_hash = manifest_hash(d.target.manifest);
  d.source_hash = manifest_hash(src.manifest);
  return d;
}

// Everything a seed's variants share.
struct SeedCache {
  std::uint64_t seed = 0;
  SegModel<float> source;
  std::vector<PseudoLabelMap> pseudo;
  IouReport source_val;
  double pseudo_retained = 0.0;
};

inline SeedCache prepare_seed(const ExperimentConfig& c, const ExperimentData& d, std::uint64_t seed) {
  SeedCache s;
  s.seed = seed;
  PretrainConfig pc = c.pretrain;
  pc.seed = seed;
  s.source = run_stage("pretrain-source", seed, [&] { return pretrain_source<float>(d.source, c.model, pc); });
  s.pseudo = run_stage("pseudo-label", seed, [&] {
    std::vector<Tensor<float>> targets;
    for (const auto& p : d.train) targets.push_back(p.target_image);
    return generate_pseudo_labels(s.source, targets);
  });
  for (const auto& p : s.pseudo) s.pseudo_retained += p.retained_fraction;
  s.pseudo_retained /= static_cast<double>(s.pseudo.size());
  s.source_val = run_stage("evaluate", seed, [&] { return evaluate_miou(s.source, d.val); });
  return s;
}

struct VariantResult {
  std::string variant;
  std::uint64_t seed = 0;
  IouReport val;
  double retrieval_pre = 0.0, retrieval_post = 0.0;
  double final_kept_fraction = 0.0;
  std::vector<MetricsRow> metrics;
};

inline VariantResult run_variant(const ExperimentData& d, const SeedCache& s,
                                 const std::string& variant, const TrainConfig& base) {
  TrainConfig tc = variant_config(variant, base);
  tc.seed = s.seed;
  VariantResult r;
  r.variant = variant;
  r.seed = s.seed;
  const std::string stage = "adapt[" + variant + "]";
  AdaptOptions ao;
  ao.dump_dir = std::filesystem::temp_directory_path() / ("cma_nan_" + variant + "_" + std::to_string(s.seed));
  AdaptState<float> st = run_stage(stage, s.seed, [&] {
    AdaptState<float> a = init_adapt_state(s.source, tc);
    r.retrieval_pre = patch_retrieval(a.student, a.head, d.val, tc.grid, tc.conf_threshold).rate();
    adapt_steps(a, d.train, s.pseudo, tc, ao);
    return a;
  });
  r.metrics = st.metrics;
  if (!r.metrics.empty()) r.final_kept_fraction = r.metrics.back().kept_patch_fraction;
  r.val = run_stage("evaluate[" + variant + "]", s.seed, [&] { return evaluate_miou(st.student, d.val); });
  r.retrieval_post = patch_retrieval(st.student, st.head, d.val, tc.grid, tc.conf_threshold).rate();
  return r;
}

// ---------------------------------------------------------------------------
// Results and manifest.

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct ExperimentResult {
  std::vector<SeedCache> seeds;
  std::vector<VariantResult> runs;
  nlohmann::json manifest;

  double mean_miou(const std::string& variant) const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : runs)
      if (r.variant == variant) {
        s += r.val.miou;
        ++n;
      }
    if (n == 0) throw std::out_of_range("no runs of variant '" + variant + "'");
    return s / static_cast<double>(n);
  }

  double mean_source_miou() const {
    double s = 0;
    for (const auto& c : seeds) s += c.source_val.miou;
    return s / static_cast<double>(seeds.size());
  }

  const VariantResult& find(const std::string& variant, std::uint64_t seed) const {
    for (const auto& r : runs)
      if (r.variant == variant && r.seed == seed) return r;
    throw std::out_of_range("no run " + variant + "/" + std::to_string(seed));
  }
};

inline std::string results_csv(const ExperimentResult& res, std::size_t k) {
  std::ostringstream o;
  o << "variant,seed,miou";
  for (std::size_t c = 0; c < k; ++c) o << ",iou_" << c;
  o << ",retrieval_pre,retrieval_post,kept_patch_fraction\n";
  const auto row = [&](const std::string& v, std::uint64_t seed, const IouReport& iou, double pre, double post,
                       double kept) {
    o << v << "," << seed << "," << fmt_g(iou.miou);
    for (std::size_t c = 0; c < k; ++c) o << "," << (iou.included[c] ? fmt_g(iou.iou[c]) : "");
    o << "," << fmt_g(pre) << "," << fmt_g(post) << "," << fmt_g(kept) << "\n";
  };
  for (const auto& s : res.seeds) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    row("source_only", s.seed, s.source_val, nan, nan, nan);
  }
  for (const auto& r : res.runs) row(r.variant, r.seed, r.val, r.retrieval_pre, r.retrieval_post, r.final_kept_fraction);
  return o.str();
}

inline nlohmann::json make_manifest(const ExperimentConfig& c, const ExperimentData& d, const ExperimentResult& res) {
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& s : res.seeds) {
    metrics.push_back({{"variant", "source_only"}, {"seed", s.seed}, {"miou", s.source_val.miou},
                       {"pseudo_label_retained", s.pseudo_retained}});
  }
  for (const auto& r : res.runs) {
    metrics.push_back({{"variant", r.variant}, {"seed", r.seed}, {"miou", r.val.miou},
                       {"retrieval_pre", r.retrieval_pre}, {"retrieval_post", r.retrieval_post}});
  }
  char th[32], sh[32];
  std::snprintf(th, sizeof th, "%016llx", static_cast<unsigned long long>(d.target_hash));
  std::snprintf(sh, sizeof sh, "%016llx", static_cast<unsigned long long>(d.source_hash));
  return {{"config", to_json(c)},
          {"seeds", c.seeds},
          {"code_version", kCodeVersion},
          {"threads", 1},
          {"dataset_manifest_hash", th},
          {"source_manifest_hash", sh},
          {"metrics", metrics}};
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << s;
  if (!out) throw std::runtime_error("failed to write " + p.string());
}

using ProgressFn = std::function<void(const std::string&)>;

// Runs every (seed, variant). With a non-empty out_dir, writes results.csv,
// manifest.json and one metrics CSV per run.
inline ExperimentResult run_experiment(const ExperimentConfig& c, const std::filesystem::path& out_dir = {},
                                       const ProgressFn& progress = {}) {
  c.validate();
  const ExperimentData d = run_stage("generate-data", c.data_seed, [&] { return make_experiment_data(c); });
  ExperimentResult res;
  for (std::uint64_t seed : c.seeds) {
    if (progress) progress("seed " + std::to_string(seed) + ": pretrain + pseudo-label");
    res.seeds.push_back(prepare_seed(c, d, seed));
    if (progress) progress("seed " + std::to_string(seed) + ": source_only mIoU " + fmt_g(res.seeds.back().source_val.miou));
    for (const auto& v : c.variants) {
      res.runs.push_back(run_variant(d, res.seeds.back(), v, c.train));
      if (progress) progress("seed " + std::to_string(seed) + ": " + v + " mIoU " + fmt_g(res.runs.back().val.miou));
    }
  }
  res.manifest = make_manifest(c, d, res);
  if (!out_dir.empty()) {
    write_text(out_dir / "results.csv", results_csv(res, c.model.num_classes));
    write_text(out_dir / "manifest.json", res.manifest.dump(2) + "\n");
    for (const auto& r : res.runs) {
      write_metrics_csv((std::filesystem::create_directories(out_dir / "metrics"), out_dir / "metrics") /
                            (r.variant + "_seed" + std::to_string(r.seed) + ".csv"),
                        r.metrics);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Sensitivity sweeps of the full variant over one training option. Source
// models and pseudo-labels are computed once per seed and shared.

struct SweepRow {
  std::string param;
  double value = 0.0;
  std::uint64_t seed = 0;
  double miou = 0.0;
};

inline TrainConfig with_param(TrainConfig c, const std::string& param, double v) {
  if (param == "conf_threshold") {
    c.conf_threshold = v;
  } else if (param == "tau") {
    c.tau = v;
  } else if (param == "grid") {
    if (v < 1 || v != std::floor(v)) throw std::invalid_argument("grid sweep values must be positive integers");
    c.grid = static_cast<std::size_t>(v);
  } else {
    throw std::invalid_argument("unknown sweep parameter '" + param + "' (conf_threshold, tau, grid)");
  }
  return c;
}

inline std::vector<double> default_sweep_values(const std::string& param) {
  if (param == "conf_threshold") return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  if (param == "tau") return {0.03, 0.1, 0.3, 1.0};
  if (param == "grid") return {1, 2, 4, 7};
  throw std::invalid_argument("unknown sweep parameter '" + param + "' (conf_threshold, tau, grid)");
}

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<SeedCache> seeds;

  double mean(double value) const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.value == value) {
        s += r.miou;
        ++n;
      }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }

  // Sample standard deviation across seeds at one value.
  double stddev(double value) const {
    const double m = mean(value);
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.value == value) {
        s += (r.miou - m) * (r.miou - m);
        ++n;
      }
    return n > 1 ? std::sqrt(s / static_cast<double>(n - 1)) : 0.0;
  }
};

inline std::string sweep_csv(const SweepResult& s) {
  std::ostringstream o;
  o << "param,value,seed,miou\n";
  for (const auto& r : s.rows) o << r.param << "," << fmt_g(r.value) << "," << r.seed << "," << fmt_g(r.miou) << "\n";
  return o.str();
}

// One row per (value, seed).
inline SweepResult run_sweep(const ExperimentConfig& c, const std::string& param, const std::vector<double>& values,
                             const ProgressFn& progress = {}, std::vector<SeedCache> cached = {}) {
  c.validate();
  for (double v : values) with_param(c.train, param, v).validate();
  const ExperimentData d = run_stage("generate-data", c.data_seed, [&] { return make_experiment_data(c); });
  SweepResult out;
  for (std::uint64_t seed : c.seeds) {
    auto it = std::find_if(cached.begin(), cached.end(), [&](const SeedCache& s) { return s.seed == seed; });
    out.seeds.push_back(it != cached.end() ? *it : prepare_seed(c, d, seed));
    for (double v : values) {
      const VariantResult r = run_variant(d, out.seeds.back(), "full", with_param(c.train, param, v));
      out.rows.push_back({param, v, seed, r.val.miou});
      if (progress) progress(param + "=" + fmt_g(v) + " seed " + std::to_string(seed) + " mIoU " + fmt_g(r.val.miou));
    }
  }
  return out;
}

}  // namespace cma
