// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale segmentation network. ENC: patchify(s) -> linear(3 s^2, d) ->
// ReLU -> linear(d, d). DEC: linear(d, K), bilinear x s to pixel logits.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cma/autodiff.hpp"
#include "cma/cmat.hpp"
#include "cma/ops.hpp"
#include "cma/tensor.hpp"

namespace cma {

struct ModelConfig {
  std::size_t stride = 8;
  std::size_t d_enc = 64;
  std::size_t num_classes = 6;
  std::size_t in_channels = 3;

  void validate() const {
    if (stride == 0 || d_enc == 0 || in_channels == 0) throw std::invalid_argument("model extents must be positive");
    if (num_classes < 2) throw std::invalid_argument("model needs at least two classes");
  }
};

template <class T>
struct SegModel {
  ModelConfig config;
  ParamGroup<T> enc_w1, enc_b1, enc_w2, enc_b2;
  ParamGroup<T> dec_w, dec_b;

  SegModel() = default;
  SegModel(const ModelConfig& cfg, std::uint64_t seed, const std::string& prefix = "")
      : config(cfg),
        enc_w1(prefix + "enc.w1", Tensor<T>({cfg.stride * cfg.stride * cfg.in_channels, cfg.d_enc})),
        enc_b1(prefix + "enc.b1", Tensor<T>({cfg.d_enc})),
        enc_w2(prefix + "enc.w2", Tensor<T>({cfg.d_enc, cfg.d_enc})),
        enc_b2(prefix + "enc.b2", Tensor<T>({cfg.d_enc})),
        dec_w(prefix + "dec.w", Tensor<T>({cfg.d_enc, cfg.num_classes})),
        dec_b(prefix + "dec.b", Tensor<T>({cfg.num_classes})) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    for (Tensor<T>* w : {&enc_w1.value, &enc_w2.value, &dec_w.value}) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w->dim(0)));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (T& v : w->values()) v = static_cast<T>(u(rng));
    }
  }

  std::vector<ParamGroup<T>*> encoder_groups() { return {&enc_w1, &enc_b1, &enc_w2, &enc_b2}; }
  std::vector<const ParamGroup<T>*> encoder_groups() const { return {&enc_w1, &enc_b1, &enc_w2, &enc_b2}; }
  std::vector<ParamGroup<T>*> decoder_groups() { return {&dec_w, &dec_b}; }
  std::vector<ParamGroup<T>*> groups() { return {&enc_w1, &enc_b1, &enc_w2, &enc_b2, &dec_w, &dec_b}; }
  std::vector<const ParamGroup<T>*> groups() const {
    return {&enc_w1, &enc_b1, &enc_w2, &enc_b2, &dec_w, &dec_b};
  }

  void set_decoder_trainable(bool on) {
    dec_w.trainable = on;
    dec_b.trainable = on;
  }
  void set_encoder_trainable(bool on) {
    for (auto* g : encoder_groups()) g->trainable = on;
  }
};

namespace model_detail {

inline ops::Spatial check_images(const Shape& s, const ModelConfig& cfg) {
  const ops::Spatial sp = ops::spatial_of(s, "SegModel input");
  if (sp.c != cfg.in_channels || sp.h % cfg.stride || sp.w % cfg.stride) {
    throw ShapeError("SegModel input " + to_string(s) + " incompatible with stride " + std::to_string(cfg.stride) +
                     " and " + std::to_string(cfg.in_channels) + " channels");
  }
  return sp;
}

}  // namespace model_detail

// Images [B, H, W, 3] -> features [B, H/s, W/s, d].
template <class T>
Tensor<T> encode(const SegModel<T>& m, const Tensor<T>& images) {
  model_detail::check_images(images.shape(), m.config);
  Tensor<T> p = ops::patchify(images, m.config.stride);
  Tensor<T> h = ops::relu(ops::linear(p, m.enc_w1.value, m.enc_b1.value));
  return ops::linear(h, m.enc_w2.value, m.enc_b2.value);
}

// Features [B, h, w, d] -> pixel logits [B, h s, w s, K].
template <class T>
Tensor<T> decode(const SegModel<T>& m, const Tensor<T>& features) {
  return ops::upsample_bilinear(ops::linear(features, m.dec_w.value, m.dec_b.value), m.config.stride);
}

template <class T>
Tensor<T> forward(const SegModel<T>& m, const Tensor<T>& images) {
  return decode(m, encode(m, images));
}

template <class T>
Var encode(Tape<T>& t, SegModel<T>& m, Var images) {
  model_detail::check_images(t.value(images).shape(), m.config);
  Var p = t.patchify(images, m.config.stride);
  Var h = t.relu(t.linear(p, t.param(m.enc_w1), t.param(m.enc_b1)));
  return t.linear(h, t.param(m.enc_w2), t.param(m.enc_b2));
}

template <class T>
Var decode(Tape<T>& t, SegModel<T>& m, Var features) {
  return t.upsample_bilinear(t.linear(features, t.param(m.dec_w), t.param(m.dec_b)), m.config.stride);
}

template <class T>
Var forward(Tape<T>& t, SegModel<T>& m, Var images) {
  return decode(t, m, encode(t, m, images));
}

// Per-pixel argmax over the last axis.
template <class T>
Tensor<std::uint8_t> argmax_labels(const Tensor<T>& scores) {
  const std::size_t k = scores.shape().back(), n = leading(scores.shape());
  Shape s = scores.shape();
  s.pop_back();
  Tensor<std::uint8_t> out(s);
  for (std::size_t i = 0; i < n; ++i) {
    const T* r = scores.data() + i * k;
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (r[c] > r[best]) best = c;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: one CMAT file per named tensor plus index.json.

class CheckpointWriter {
 public:
  explicit CheckpointWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  template <class T>
  void add(const std::string& name, const Tensor<T>& t) {
    const std::string file = sanitize(name) + ".cmat";
    write_cmat(dir_ / file, t);
    index_["tensors"][name] = {{"file", file}, {"dtype", static_cast<int>(dtype_of<T>::value)}, {"shape", t.shape()}};
  }

  void set(const std::string& key, nlohmann::json v) { index_["meta"][key] = std::move(v); }

  void finish() {
    std::ofstream out(dir_ / "index.json");
    out << index_.dump(2) << "\n";
    if (!out) throw std::runtime_error("failed to write " + (dir_ / "index.json").string());
  }

 private:
  static std::string sanitize(std::string s) {
    for (char& c : s)
      if (c == '/' || c == '\\' || c == ' ') c = '_';
    return s;
  }

  std::filesystem::path dir_;
  nlohmann::json index_ = {{"format", "cma-checkpoint"}, {"version", 1}, {"tensors", nlohmann::json::object()},
                           {"meta", nlohmann::json::object()}};
};

class CheckpointReader {
 public:
  explicit CheckpointReader(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::ifstream in(dir_ / "index.json");
    if (!in) throw FormatError("missing checkpoint index in " + dir_.string());
    index_ = nlohmann::json::parse(in);
    if (index_.value("format", "") != "cma-checkpoint") throw FormatError("not a checkpoint index: " + dir_.string());
  }

  bool has(const std::string& name) const { return index_["tensors"].contains(name); }

  template <class T>
  Tensor<T> get(const std::string& name) const {
    if (!has(name)) throw FormatError("checkpoint " + dir_.string() + " has no tensor '" + name + "'");
    return read_cmat<T>(dir_ / index_["tensors"][name]["file"].get<std::string>());
  }

  const nlohmann::json& meta() const { return index_["meta"]; }

 private:
  std::filesystem::path dir_;
  nlohmann::json index_;
};

template <class T>
void save_groups(CheckpointWriter& w, const std::vector<const ParamGroup<T>*>& groups) {
  for (const auto* g : groups) w.add(g->name, g->value);
}

template <class T>
void load_groups(const CheckpointReader& r, const std::vector<ParamGroup<T>*>& groups) {
  for (auto* g : groups) {
    Tensor<T> v = r.get<T>(g->name);
    require_same_shape(v.shape(), g->value.shape(), ("checkpoint tensor " + g->name).c_str());
    g->value = std::move(v);
  }
}

template <class T>
void save_model(const std::filesystem::path& dir, const SegModel<T>& m) {
  CheckpointWriter w(dir);
  save_groups(w, m.groups());
  w.set("stride", m.config.stride);
  w.set("d_enc", m.config.d_enc);
  w.set("num_classes", m.config.num_classes);
  w.set("in_channels", m.config.in_channels);
  w.finish();
}

template <class T>
SegModel<T> load_model(const std::filesystem::path& dir) {
  CheckpointReader r(dir);
  ModelConfig cfg;
  cfg.stride = r.meta().at("stride").get<std::size_t>();
  cfg.d_enc = r.meta().at("d_enc").get<std::size_t>();
  cfg.num_classes = r.meta().at("num_classes").get<std::size_t>();
  cfg.in_channels = r.meta().at("in_channels").get<std::size_t>();
  SegModel<T> m(cfg, 0);
  load_groups(r, m.groups());
  return m;
}

}  // namespace cma
