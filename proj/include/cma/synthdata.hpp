// SPDX-License-Identifier: Apache-2.0
//
// Procedural paired normal/adverse scenes with exact labels, flow and
// confidence.
//
// A scene is a Voronoi partition of the reference image plane; each cell
// carries a class with its own base colour and value-noise texture. The
// reference view renders the plane directly. The target view looks at the
// plane through an affine map (target pixel -> reference coordinate), snapped
// to the reference pixel grid so that labels agree exactly wherever a
// correspondence exists. Dynamic objects are drawn into exactly one of the
// two views and zero the confidence under their footprint. The adverse
// rendering (darkening, gamma, noise, fog) touches target pixel values only.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cma/cmat.hpp"
#include "cma/tensor.hpp"
#include "cma/warp.hpp"

namespace cma {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct AdverseParams {
  double brightness_scale = 1.0;
  double gamma = 1.0;
  double noise_sigma = 0.0;
  double fog_alpha = 0.0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 6;
  std::size_t num_regions = 10;
  // Target pixel (x, y) maps to reference (a00 x + a01 y + a02, a10 x + a11 y + a12).
  std::array<double, 6> affine{1, 0, 0, 0, 1, 0};
  AdverseParams adverse;
  std::size_t dynamic_objects = 0;

  void validate() const {
    const double det = affine[0] * affine[4] - affine[1] * affine[3];
    if (!(std::abs(det) > 0.1)) throw std::invalid_argument("scene affine is not invertible");
    if (height < 3 || width < 3) throw std::invalid_argument("scene too small");
    if (num_classes < 2 || num_classes > 254) throw std::invalid_argument("num_classes out of range");
    if (num_regions < num_classes) throw std::invalid_argument("num_regions must be >= num_classes");
    if (!(adverse.gamma > 0.0) || adverse.brightness_scale < 0.0 || adverse.noise_sigma < 0.0 ||
        adverse.fog_alpha < 0.0 || adverse.fog_alpha > 1.0) {
      throw std::invalid_argument("invalid adverse parameters");
    }
  }
};

struct PairedSample {
  Tensor<float> target_image;           // [H, W, 3], adverse, target viewpoint
  Tensor<float> reference_image;        // [H, W, 3], normal, reference viewpoint
  Tensor<std::uint8_t> target_labels;   // [H, W], 255 = ignore
  FlowField<float> flow;                // target -> reference, pixels
  Tensor<std::uint8_t> reference_labels;  // diagnostics only; may be empty after loading

  std::size_t height() const { return target_image.dim(0); }
  std::size_t width() const { return target_image.dim(1); }
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sampling ranges for a dataset. Defaults are the benchmark settings.
struct SpecRanges {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 6;
  std::size_t min_regions = 8;
  std::size_t max_regions = 14;
  double max_shift_x = 12.0;
  double max_shift_y = 4.0;
  double max_rotation_deg = 4.0;
  double min_scale = 0.92;
  double max_scale = 1.08;
  double brightness_min = 0.2, brightness_max = 0.6;
  double gamma_min = 1.5, gamma_max = 2.5;
  double noise_min = 0.02, noise_max = 0.08;
  double fog_min = 0.0, fog_max = 0.5;
  std::size_t max_dynamic_objects = 3;
};

namespace synth_detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline double lattice(std::uint64_t seed, long ix, long iy) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(ix) * 0x632BE59BD9B4E019ull +
                                                       static_cast<std::uint64_t>(iy)));
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);  // [0, 1)
}

// Smooth value noise in [-1, 1] with unit lattice spacing `cell`.
inline double value_noise(std::uint64_t seed, double x, double y, double cell) {
  const double fx = x / cell, fy = y / cell;
  const long x0 = static_cast<long>(std::floor(fx)), y0 = static_cast<long>(std::floor(fy));
  const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
  const double sx = tx * tx * (3 - 2 * tx), sy = ty * ty * (3 - 2 * ty);
  const double v00 = lattice(seed, x0, y0), v10 = lattice(seed, x0 + 1, y0);
  const double v01 = lattice(seed, x0, y0 + 1), v11 = lattice(seed, x0 + 1, y0 + 1);
  const double v = (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy;
  return 2.0 * v - 1.0;
}

inline std::array<double, 3> base_color(std::size_t cls, std::size_t k) {
  static constexpr std::array<std::array<double, 3>, 6> kPalette{{
      {0.50, 0.50, 0.52},  // road
      {0.86, 0.56, 0.72},  // sidewalk
      {0.62, 0.40, 0.24},  // building
      {0.20, 0.62, 0.22},  // vegetation
      {0.42, 0.66, 0.96},  // sky
      {0.88, 0.16, 0.14},  // vehicle
  }};
  if (k <= kPalette.size()) return kPalette[cls];
  // Evenly spaced hues for larger label sets.
  const double hue = 6.0 * static_cast<double>(cls) / static_cast<double>(k);
  const double f = hue - std::floor(hue);
  const double v = 0.85, s = 0.7, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (static_cast<int>(hue) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Site {
  double x, y;
  std::uint8_t cls;
};

struct DynamicObject {
  bool in_target;  // otherwise drawn in the reference view
  bool disc;
  double cx, cy, rx, ry;
  std::uint8_t cls;

  bool covers(double x, double y) const {
    const double u = (x - cx) / rx, v = (y - cy) / ry;
    return disc ? u * u + v * v <= 1.0 : std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
  }
};

struct World {
  std::vector<Site> sites;
  std::vector<DynamicObject> objects;
  std::uint64_t texture_seed;
  std::size_t k;

  std::uint8_t label_at(double x, double y) const {
    double best = 1e300;
    std::uint8_t cls = 0;
    for (const Site& s : sites) {
      const double d = (s.x - x) * (s.x - x) + (s.y - y) * (s.y - y);
      if (d < best) {
        best = d;
        cls = s.cls;
      }
    }
    return cls;
  }

  std::array<double, 3> color(std::uint8_t cls, double x, double y) const {
    auto c = base_color(cls, k);
    const double n = 0.07 * value_noise(texture_seed + cls, x, y, 6.0) +
                     0.03 * value_noise(texture_seed + 97 + cls, x, y, 2.0);
    for (double& v : c) v = std::clamp(v + n, 0.0, 1.0);
    return c;
  }
};

inline World make_world(const SceneSpec& spec, std::uint64_t attempt) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(attempt), 0x51u};
  std::mt19937_64 rng(seq);
  World w;
  w.k = spec.num_classes;
  w.texture_seed = splitmix64(spec.seed * 31 + attempt);
  const double hh = static_cast<double>(spec.height), ww = static_cast<double>(spec.width);
  std::uniform_real_distribution<double> ux(-0.15 * ww, 1.15 * ww), uy(-0.15 * hh, 1.15 * hh);
  std::vector<std::uint8_t> classes(spec.num_regions);
  for (std::size_t i = 0; i < spec.num_regions; ++i) {
    classes[i] = static_cast<std::uint8_t>(i < spec.num_classes ? i : rng() % spec.num_classes);
  }
  std::shuffle(classes.begin(), classes.end(), rng);
  // Sites inside the image for the first K so every class tends to be visible.
  std::uniform_real_distribution<double> ix(0.1 * ww, 0.9 * ww), iy(0.1 * hh, 0.9 * hh);
  for (std::size_t i = 0; i < spec.num_regions; ++i) {
    const bool inside = i < spec.num_classes;
    w.sites.push_back({inside ? ix(rng) : ux(rng), inside ? iy(rng) : uy(rng), classes[i]});
  }
  std::uniform_real_distribution<double> radius(3.0, 7.0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < spec.dynamic_objects; ++i) {
    DynamicObject o;
    o.in_target = coin(rng);
    o.disc = coin(rng);
    o.cx = ix(rng);
    o.cy = iy(rng);
    o.rx = radius(rng);
    o.ry = radius(rng);
    o.cls = static_cast<std::uint8_t>(rng() % spec.num_classes);
    w.objects.push_back(o);
  }
  return w;
}

inline void put_rgb(Tensor<float>& img, std::size_t idx, const std::array<double, 3>& c) {
  for (std::size_t ch = 0; ch < 3; ++ch) img[idx * 3 + ch] = static_cast<float>(c[ch]);
}

inline bool class_shares_ok(const Tensor<std::uint8_t>& labels, std::size_t k) {
  std::vector<std::size_t> counts(k, 0);
  for (std::uint8_t l : labels.values())
    if (l != kIgnoreLabel) ++counts[l];
  const double total = static_cast<double>(labels.size());
  for (std::size_t c : counts)
    if (c > 0 && static_cast<double>(c) < 0.01 * total) return false;
  return true;
}

inline bool all_classes_present(const Tensor<std::uint8_t>& labels, std::size_t k) {
  std::vector<bool> seen(k, false);
  for (std::uint8_t l : labels.values())
    if (l != kIgnoreLabel) seen[l] = true;
  return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

}  // namespace synth_detail

// Adverse rendering: brightness * x^gamma, blended toward grey by fog_alpha,
// plus Gaussian noise, clamped to [0, 1].
inline void apply_adverse(Tensor<float>& img, const AdverseParams& p, std::uint64_t seed) {
  const bool identity = p.gamma == 1.0 && p.brightness_scale == 1.0 && p.fog_alpha == 0.0;
  if (!identity) {
    for (float& v : img.values()) {
      const double d = p.brightness_scale * std::pow(static_cast<double>(v), p.gamma);
      v = static_cast<float>((1.0 - p.fog_alpha) * d + p.fog_alpha * 0.5);
    }
  }
  if (p.noise_sigma > 0.0) {
    std::mt19937_64 rng(synth_detail::splitmix64(seed ^ 0xAD7E55Eull));
    std::normal_distribution<double> n(0.0, p.noise_sigma);
    for (float& v : img.values()) v = static_cast<float>(static_cast<double>(v) + n(rng));
  }
  for (float& v : img.values()) v = std::clamp(v, 0.0f, 1.0f);
}

inline constexpr int kMaxLayoutRetries = 16;

inline PairedSample generate_pair(const SceneSpec& spec) {
  using namespace synth_detail;
  spec.validate();
  const std::size_t h = spec.height, w = spec.width;
  const auto& a = spec.affine;
  std::optional<PairedSample> fallback;
  for (int attempt = 0; attempt < kMaxLayoutRetries; ++attempt) {
    const World world = make_world(spec, static_cast<std::uint64_t>(attempt));
    PairedSample s;
    s.reference_image = Tensor<float>({h, w, 3});
    s.reference_labels = Tensor<std::uint8_t>({h, w});
    s.target_image = Tensor<float>({h, w, 3});
    s.target_labels = Tensor<std::uint8_t>({h, w});
    s.flow = {Tensor<float>({h, w, 2}), Tensor<float>({h, w})};

    const auto border = [&](std::size_t x, std::size_t y) {
      return x == 0 || y == 0 || x + 1 == w || y + 1 == h;
    };

    // Reference view.
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        std::uint8_t cls = world.label_at(fx, fy);
        auto col = world.color(cls, fx, fy);
        for (const auto& o : world.objects) {
          if (!o.in_target && o.covers(fx, fy)) {
            cls = o.cls;
            col = world.color(o.cls, fx + 1000.0, fy + 1000.0);
          }
        }
        put_rgb(s.reference_image, i, col);
        s.reference_labels[i] = border(x, y) ? kIgnoreLabel : cls;
      }

    // Target view.
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        const double qx = a[0] * fx + a[1] * fy + a[2];
        const double qy = a[3] * fx + a[4] * fy + a[5];
        const double sx = std::round(qx), sy = std::round(qy);
        s.flow.flow[i * 2] = static_cast<float>(qx - fx);
        s.flow.flow[i * 2 + 1] = static_cast<float>(qy - fy);
        bool valid = qx >= 0.0 && qy >= 0.0 && qx <= static_cast<double>(w - 1) &&
                     qy <= static_cast<double>(h - 1);
        std::uint8_t cls = world.label_at(sx, sy);
        auto col = world.color(cls, sx, sy);
        for (const auto& o : world.objects) {
          if (o.in_target) {
            if (o.covers(fx, fy)) {
              cls = o.cls;
              col = world.color(o.cls, fx - 1000.0, fy - 1000.0);
              valid = false;
            }
          } else if (o.covers(sx, sy)) {
            valid = false;
          }
        }
        put_rgb(s.target_image, i, col);
        s.target_labels[i] = border(x, y) ? kIgnoreLabel : cls;
        s.flow.confidence[i] = valid ? 1.0f : 0.0f;
      }

    if (!class_shares_ok(s.target_labels, spec.num_classes)) continue;
    apply_adverse(s.target_image, spec.adverse, spec.seed);
    if (all_classes_present(s.target_labels, spec.num_classes)) return s;
    // Layouts hiding a class are kept only as a fallback.
    if (!fallback) fallback = std::move(s);
  }
  if (fallback) return std::move(*fallback);
  throw GenerationError("scene " + std::to_string(spec.seed) +
                        ": class-share constraint not met within retry budget");
}

// Draws a scene description for `seed` from the ranges.
inline SceneSpec sample_spec(std::uint64_t seed, const SpecRanges& r) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5ECu};
  std::mt19937_64 rng(seq);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  SceneSpec s;
  s.seed = seed;
  s.height = r.height;
  s.width = r.width;
  s.num_classes = r.num_classes;
  s.num_regions = std::uniform_int_distribution<std::size_t>(r.min_regions, r.max_regions)(rng);
  const double angle = uni(-r.max_rotation_deg, r.max_rotation_deg) * std::numbers::pi / 180.0;
  const double scl = uni(r.min_scale, r.max_scale);
  const double tx = uni(-r.max_shift_x, r.max_shift_x), ty = uni(-r.max_shift_y, r.max_shift_y);
  const double cx = 0.5 * static_cast<double>(r.width - 1), cy = 0.5 * static_cast<double>(r.height - 1);
  const double c = scl * std::cos(angle), sn = scl * std::sin(angle);
  // q = centre + S R (p - centre) + t
  s.affine = {c, -sn, cx - c * cx + sn * cy + tx, sn, c, cy - sn * cx - c * cy + ty};
  s.adverse.brightness_scale = uni(r.brightness_min, r.brightness_max);
  s.adverse.gamma = uni(r.gamma_min, r.gamma_max);
  s.adverse.noise_sigma = uni(r.noise_min, r.noise_max);
  s.adverse.fog_alpha = uni(r.fog_min, r.fog_max);
  s.dynamic_objects = std::uniform_int_distribution<std::size_t>(0, r.max_dynamic_objects)(rng);
  return s;
}

struct Dataset {
  std::vector<PairedSample> samples;
  std::vector<SceneSpec> manifest;
};

// Sample i uses seed base_seed + i.
inline Dataset generate_dataset(std::uint64_t base_seed, std::size_t n, const SpecRanges& ranges) {
  if (n == 0) throw std::invalid_argument("generate_dataset: n must be >= 1");
  Dataset d;
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.manifest.push_back(sample_spec(base_seed + i, ranges));
    d.samples.push_back(generate_pair(d.manifest.back()));
  }
  return d;
}

// ---------------------------------------------------------------------------
// JSON manifest and on-disk layout.

inline nlohmann::json to_json(const SceneSpec& s) {
  return {{"seed", s.seed},
          {"height", s.height},
          {"width", s.width},
          {"num_classes", s.num_classes},
          {"num_regions", s.num_regions},
          {"affine", s.affine},
          {"brightness_scale", s.adverse.brightness_scale},
          {"gamma", s.adverse.gamma},
          {"noise_sigma", s.adverse.noise_sigma},
          {"fog_alpha", s.adverse.fog_alpha},
          {"dynamic_objects", s.dynamic_objects}};
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> kKeys{"seed", "height", "width", "num_classes", "num_regions", "affine",
                                              "brightness_scale", "gamma", "noise_sigma", "fog_alpha",
                                              "dynamic_objects"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw std::invalid_argument("unknown scene spec key '" + key + "'");
    }
  }
  SceneSpec s;
  s.seed = j.value("seed", s.seed);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.num_regions = j.value("num_regions", s.num_regions);
  if (j.contains("affine")) s.affine = j.at("affine").get<std::array<double, 6>>();
  s.adverse.brightness_scale = j.value("brightness_scale", s.adverse.brightness_scale);
  s.adverse.gamma = j.value("gamma", s.adverse.gamma);
  s.adverse.noise_sigma = j.value("noise_sigma", s.adverse.noise_sigma);
  s.adverse.fog_alpha = j.value("fog_alpha", s.adverse.fog_alpha);
  s.dynamic_objects = j.value("dynamic_objects", s.dynamic_objects);
  s.validate();
  return s;
}

inline nlohmann::json manifest_json(const std::vector<SceneSpec>& specs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : specs) arr.push_back(to_json(s));
  return {{"samples", arr}};
}

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::uint64_t manifest_hash(const std::vector<SceneSpec>& specs) {
  const std::string s = manifest_json(specs).dump();
  return fnv1a(s.data(), s.size());
}

// <root>/pair_<i>/{target,reference,labels,flow,conf}.cmat + manifest.json
inline void save_dataset(const std::filesystem::path& root, const Dataset& d) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& s = d.samples[i];
    const fs::path dir = root / ("pair_" + std::to_string(i));
    fs::create_directories(dir);
    write_cmat(dir / "target.cmat", s.target_image);
    write_cmat(dir / "reference.cmat", s.reference_image);
    write_cmat(dir / "labels.cmat", s.target_labels);
    write_cmat(dir / "flow.cmat", s.flow.flow);
    write_cmat(dir / "conf.cmat", s.flow.confidence);
  }
  std::ofstream out(root / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + root.string());
  out << manifest_json(d.manifest).dump(2) << '\n';
  if (!out) throw std::runtime_error("manifest write failed in " + root.string());
}

inline Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::ifstream in(root / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + root.string());
  const auto j = nlohmann::json::parse(in);
  Dataset d;
  for (const auto& e : j.at("samples")) d.manifest.push_back(scene_spec_from_json(e));
  for (std::size_t i = 0; i < d.manifest.size(); ++i) {
    const fs::path dir = root / ("pair_" + std::to_string(i));
    PairedSample s;
    s.target_image = read_cmat<float>(dir / "target.cmat");
    s.reference_image = read_cmat<float>(dir / "reference.cmat");
    s.target_labels = read_cmat<std::uint8_t>(dir / "labels.cmat");
    s.flow.flow = read_cmat<float>(dir / "flow.cmat");
    s.flow.confidence = read_cmat<float>(dir / "conf.cmat");
    s.flow.validate();
    d.samples.push_back(std::move(s));
  }
  return d;
}

// Replaces a sample's flow with externally produced flow/confidence files of
// the same shape.
inline void substitute_flow(PairedSample& s, const std::filesystem::path& flow_file,
                            const std::filesystem::path& conf_file) {
  FlowField<float> f{read_cmat<float>(flow_file), read_cmat<float>(conf_file)};
  f.validate();
  require_same_shape(f.flow.shape(), s.flow.flow.shape(), "substitute_flow");
  s.flow = std::move(f);
}

}  // namespace cma
