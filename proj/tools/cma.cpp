// SPDX-License-Identifier: Apache-2.0
//
// cma: command-line front end for data generation, source pre-training,
// pseudo-labelling, adaptation, evaluation, checks, sweeps and experiments.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cma/adapt.hpp"
#include "cma/checks.hpp"
#include "cma/eval.hpp"
#include "cma/experiment.hpp"
#include "cma/model.hpp"
#include "cma/synthdata.hpp"

namespace fs = std::filesystem;
using namespace cma;

namespace {

ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  return experiment_config_from_json(nlohmann::json::parse(in));
}

void say(const std::string& s) { std::cerr << "[cma] " << s << std::endl; }

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

nlohmann::json iou_json(const IouReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t c = 0; c < r.iou.size(); ++c) per.push_back(r.included[c] ? nlohmann::json(r.iou[c]) : nlohmann::json());
  return {{"miou", r.miou}, {"iou", per}};
}

std::vector<PseudoLabelMap> load_pseudo(const fs::path& dir, std::size_t n) {
  std::vector<PseudoLabelMap> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].labels = read_cmat<std::uint8_t>(dir / ("pair_" + std::to_string(i) + ".cmat"));
  return out;
}

void apply_external_flow(Dataset& d, const fs::path& flow_dir) {
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const fs::path p = flow_dir / ("pair_" + std::to_string(i));
    substitute_flow(d.samples[i], p / "flow.cmat", p / "conf.cmat");
  }
}

std::vector<double> parse_values(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive model adaptation on synthetic paired scenes"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "experiment JSON (every field optional; unknown keys rejected)");

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "write train/ and val/ pair datasets");
  std::string gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("-o,--out", gen_out, "output root")->required();
  gen->add_option("--seed", gen_seed, "base seed (overrides data_seed)");

  // pretrain-source
  auto* pre = app.add_subcommand("pretrain-source", "train the source model on normal-condition images");
  std::string pre_out;
  std::uint64_t pre_seed = 0;
  pre->add_option("-o,--out", pre_out, "model checkpoint directory")->required();
  pre->add_option("--seed", pre_seed, "model / pre-training seed");

  // pseudo-label
  auto* pl = app.add_subcommand("pseudo-label", "CBST pseudo-labels for a dataset's target images");
  std::string pl_model, pl_data, pl_out;
  pl->add_option("-m,--model", pl_model)->required();
  pl->add_option("-d,--data", pl_data)->required();
  pl->add_option("-o,--out", pl_out)->required();

  // adapt
  auto* ad = app.add_subcommand("adapt", "adapt a source model on target/reference pairs");
  std::string ad_model, ad_data, ad_pseudo, ad_out, ad_resume, ad_flow, ad_variant = "full";
  std::uint64_t ad_seed = 0;
  std::size_t ad_stop = std::numeric_limits<std::size_t>::max();
  ad->add_option("-m,--model", ad_model, "source model checkpoint")->required();
  ad->add_option("-d,--data", ad_data)->required();
  ad->add_option("-p,--pseudo", ad_pseudo)->required();
  ad->add_option("-o,--out", ad_out)->required();
  ad->add_option("--seed", ad_seed);
  ad->add_option("--variant", ad_variant, "full, no_cdc, no_warp, no_conf or global_pool");
  ad->add_option("--resume", ad_resume, "adaptation state to continue from");
  ad->add_option("--stop-at", ad_stop, "pause before this iteration");
  ad->add_option("--flow-dir", ad_flow, "external flow: <dir>/pair_<i>/{flow,conf}.cmat replace the dataset's flow");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "sliding-window mIoU on a dataset's target images");
  std::string ev_model, ev_data, ev_out;
  ev->add_option("-m,--model", ev_model)->required();
  ev->add_option("-d,--data", ev_data)->required();
  ev->add_option("-o,--out", ev_out, "write the report JSON here too");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every loss (exit 1 on failure)");
  std::uint64_t gc_seed = 0;
  gc->add_option("--seed", gc_seed);

  // sweep
  auto* sw = app.add_subcommand("sweep", "sensitivity sweep of the full variant");
  std::string sw_param = "conf_threshold", sw_values, sw_out;
  sw->add_option("--param", sw_param, "conf_threshold, tau or grid");
  sw->add_option("--values", sw_values, "comma separated; defaults per parameter");
  sw->add_option("-o,--out", sw_out, "output directory")->required();

  // experiment
  auto* ex = app.add_subcommand("experiment", "all seeds x variants, plus source-only");
  std::string ex_out;
  ex->add_option("-o,--out", ex_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = load_config(config_path);

    if (*gen) {
      ExperimentConfig c = cfg;
      if (gen_seed) c.data_seed = *gen_seed;
      ExperimentData d = make_experiment_data(c);
      Dataset train, val;
      const std::size_t n_train = c.num_pairs - c.val_pairs;
      for (std::size_t i = 0; i < c.num_pairs; ++i) {
        Dataset& dst = i < n_train ? train : val;
        dst.samples.push_back(d.target.samples[i]);
        dst.manifest.push_back(d.target.manifest[i]);
      }
      save_dataset(fs::path(gen_out) / "train", train);
      save_dataset(fs::path(gen_out) / "val", val);
      print_json({{"train", train.samples.size()}, {"val", val.samples.size()}, {"manifest_hash", d.target_hash}});
      return 0;
    }

    if (*pre) {
      const ExperimentData d = make_experiment_data(cfg);
      PretrainConfig pc = cfg.pretrain;
      pc.seed = pre_seed;
      double last = 0;
      auto m = pretrain_source<float>(d.source, cfg.model, pc, [&](std::size_t it, double l) {
        last = l;
        if ((it + 1) % 200 == 0) say("pretrain " + std::to_string(it + 1) + " loss " + fmt_g(l));
      });
      save_model(pre_out, m);
      print_json({{"iterations", pc.iterations}, {"final_loss", last}, {"out", pre_out}});
      return 0;
    }

    if (*pl) {
      const auto m = load_model<float>(pl_model);
      const Dataset d = load_dataset(pl_data);
      std::vector<Tensor<float>> targets;
      for (const auto& s : d.samples) targets.push_back(s.target_image);
      const auto maps = generate_pseudo_labels(m, targets);
      fs::create_directories(pl_out);
      double retained = 0;
      for (std::size_t i = 0; i < maps.size(); ++i) {
        write_cmat(fs::path(pl_out) / ("pair_" + std::to_string(i) + ".cmat"), maps[i].labels);
        retained += maps[i].retained_fraction;
      }
      print_json({{"maps", maps.size()}, {"mean_retained_fraction", retained / static_cast<double>(maps.size())}});
      return 0;
    }

    if (*ad) {
      Dataset d = load_dataset(ad_data);
      if (!ad_flow.empty()) apply_external_flow(d, ad_flow);
      const auto pseudo = load_pseudo(ad_pseudo, d.samples.size());
      TrainConfig tc = variant_config(ad_variant, cfg.train);
      tc.seed = ad_seed;
      AdaptState<float> st = ad_resume.empty() ? init_adapt_state(load_model<float>(ad_model), tc)
                                               : load_adapt_state<float>(ad_resume, tc);
      AdaptOptions ao;
      ao.dump_dir = fs::path(ad_out) / "nan_dump";
      ao.stop_at = ad_stop;
      ao.on_iteration = [](const MetricsRow& r) {
        if ((r.iter + 1) % 100 == 0) say(format_metrics_row(r));
      };
      adapt_steps(st, d.samples, pseudo, tc, ao);
      fs::create_directories(ad_out);
      save_adapt_state(fs::path(ad_out) / "state", st);
      save_model(fs::path(ad_out) / "student", st.student);
      write_metrics_csv(fs::path(ad_out) / "metrics.csv", st.metrics);
      print_json({{"iteration", st.iteration}, {"queue_size", st.queue.size()}, {"out", ad_out}});
      return 0;
    }

    if (*ev) {
      const auto m = load_model<float>(ev_model);
      const Dataset d = load_dataset(ev_data);
      const nlohmann::json j = iou_json(evaluate_miou(m, d.samples));
      if (!ev_out.empty()) write_text(ev_out, j.dump(2) + "\n");
      print_json(j);
      return 0;
    }

    if (*gc) {
      GradientSuiteConfig g;
      g.seed = gc_seed;
      const auto rep = run_gradient_suite(g);
      for (const auto& [name, r] : rep.losses) {
        std::printf("%-6s max_rel_error %.3e  %s\n", name.c_str(), r.max_rel_error(), r.passed ? "ok" : "FAILED");
      }
      std::printf("kept patches %zu, %.2f s\n", rep.kept_patches, rep.seconds);
      return rep.passed() ? 0 : 1;
    }

    if (*sw) {
      const std::vector<double> values = sw_values.empty() ? default_sweep_values(sw_param) : parse_values(sw_values);
      const auto res = run_sweep(cfg, sw_param, values, say);
      write_text(fs::path(sw_out) / "sweep.csv", sweep_csv(res));
      nlohmann::json summary = nlohmann::json::array();
      for (double v : values) summary.push_back({{"value", v}, {"mean_miou", res.mean(v)}, {"std", res.stddev(v)}});
      write_text(fs::path(sw_out) / "summary.json", summary.dump(2) + "\n");
      print_json(summary);
      return 0;
    }

    if (*ex) {
      const auto res = run_experiment(cfg, ex_out, say);
      nlohmann::json summary = {{"source_only", res.mean_source_miou()}};
      for (const auto& v : cfg.variants) summary[v] = res.mean_miou(v);
      print_json(summary);
      return 0;
    }
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
