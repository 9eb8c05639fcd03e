#pragma once

// Procedural pose-varied persons. Each person has K rigid parts laid out on a
// (S x 2S) canvas. Attribute a is drawn as a dark glyph at the centre of its
// host part (part (a mod K) + 1): rings, crosses and bars in turn. Parts also
// carry off-centre clutter glyphs that carry no label information.
//
// Pose (frontal, profile, back) changes the layout: profile compresses the
// body horizontally, back mirrors it and hides the glyph on part 1. Every part
// is further articulated (offset and rotation), and the whole person is
// translated and scaled inside the canvas.
//
// A detection of part k views part k alone (over the background) through a
// slightly misaligned copy of its true frame, so its patch is roughly
// pose-normalized. Its score is exp(-alignment error) * (1 - u), u uniform in
// [0, score_noise]. False activations view the full scene through a random
// frame and score low because their frame is far from the true one.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <system_error>
#include <vector>

#include "panda/error.hpp"
#include "panda/image.hpp"
#include "panda/kv_config.hpp"
#include "panda/manifest.hpp"
#include "panda/parallel.hpp"
#include "panda/random.hpp"
#include "panda/tensor.hpp"

namespace panda {

struct SynthConfig {
  std::size_t parts = 6;
  std::size_t attributes = 4;
  /// Probability of each attribute being present; cycled when shorter than `attributes`.
  std::vector<double> attribute_prior{0.5, 0.4, 0.35, 0.3};
  /// P(frontal), P(profile), P(back).
  std::vector<double> pose_distribution{0.6, 0.25, 0.15};
  /// Per pose, probability that each part is visible.
  std::vector<double> visibility{0.95, 0.85, 0.9};
  double score_noise = 0.3;
  double false_activation_rate = 0.1;
  /// Standard deviation of additive pixel noise.
  double glyph_noise = 0.05;
  /// Probability that a part carries a clutter glyph.
  double clutter_rate = 0.6;
  /// Probability that a known label is additionally marked unknown.
  double unknown_rate = 0.05;
  /// Scales part offsets and rotations in the global layout.
  double articulation = 1.0;
  /// Scales the misalignment of detection frames.
  double misalignment = 1.0;
  std::size_t patch_size = 64;
  std::size_t train_size = 800;
  std::size_t val_size = 100;
  std::size_t test_size = 200;
  std::uint64_t seed = 1;

  static constexpr std::size_t kMaxParts = 12;

  std::vector<std::string> attribute_names() const {
    std::vector<std::string> out;
    for (std::size_t a = 0; a < attributes; ++a) out.push_back("attr" + std::to_string(a + 1));
    return out;
  }

  double prior(std::size_t a) const { return attribute_prior[a % attribute_prior.size()]; }
  /// 1-based host part of attribute a (0-based index).
  int host_part(std::size_t a) const { return static_cast<int>(a % parts) + 1; }

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0 && p <= 1)) throw ConfigError(std::string("synth.") + name + " must be in [0, 1]");
    };
    if (parts < 1 || parts > kMaxParts) throw ConfigError("synth.parts must be in [1, " + std::to_string(kMaxParts) + "]");
    if (attributes < 1 || attributes > 3 * parts) throw ConfigError("synth.attributes must be in [1, 3 * parts]");
    if (attribute_prior.empty()) throw ConfigError("synth.attribute_prior is empty");
    for (double p : attribute_prior) prob(p, "attribute_prior");
    if (pose_distribution.size() != 3) throw ConfigError("synth.pose_distribution needs three entries");
    double total = 0;
    for (double p : pose_distribution) {
      prob(p, "pose_distribution");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("synth.pose_distribution must sum to 1");
    if (visibility.size() != 3) throw ConfigError("synth.visibility needs three entries");
    for (double p : visibility) prob(p, "visibility");
    prob(score_noise, "score_noise");
    prob(false_activation_rate, "false_activation_rate");
    prob(clutter_rate, "clutter_rate");
    prob(unknown_rate, "unknown_rate");
    if (!(glyph_noise >= 0)) throw ConfigError("synth.glyph_noise must be non-negative");
    if (!(articulation >= 0) || !(misalignment >= 0)) throw ConfigError("synth.articulation and synth.misalignment must be non-negative");
    if (patch_size < 8) throw ConfigError("synth.patch_size must be at least 8");
    if (train_size < 1 || val_size < 1 || test_size < 1) throw ConfigError("synth split sizes must be at least 1");
  }

  void to_kv(KvConfig& cfg, const std::string& prefix = "synth.") const {
    cfg.set(prefix + "parts", kv_value(parts));
    cfg.set(prefix + "attributes", kv_value(attributes));
    cfg.set(prefix + "attribute_prior", kv_value(attribute_prior));
    cfg.set(prefix + "pose_distribution", kv_value(pose_distribution));
    cfg.set(prefix + "visibility", kv_value(visibility));
    cfg.set(prefix + "score_noise", kv_value(score_noise));
    cfg.set(prefix + "false_activation_rate", kv_value(false_activation_rate));
    cfg.set(prefix + "glyph_noise", kv_value(glyph_noise));
    cfg.set(prefix + "clutter_rate", kv_value(clutter_rate));
    cfg.set(prefix + "unknown_rate", kv_value(unknown_rate));
    cfg.set(prefix + "articulation", kv_value(articulation));
    cfg.set(prefix + "misalignment", kv_value(misalignment));
    cfg.set(prefix + "patch_size", kv_value(patch_size));
    cfg.set(prefix + "train_size", kv_value(train_size));
    cfg.set(prefix + "val_size", kv_value(val_size));
    cfg.set(prefix + "test_size", kv_value(test_size));
    cfg.set(prefix + "seed", kv_value(seed));
  }

  void apply(const KvConfig& cfg, const std::string& prefix = "synth.") {
    cfg.read(prefix + "parts", parts);
    cfg.read(prefix + "attributes", attributes);
    cfg.read(prefix + "attribute_prior", attribute_prior);
    cfg.read(prefix + "pose_distribution", pose_distribution);
    cfg.read(prefix + "visibility", visibility);
    cfg.read(prefix + "score_noise", score_noise);
    cfg.read(prefix + "false_activation_rate", false_activation_rate);
    cfg.read(prefix + "glyph_noise", glyph_noise);
    cfg.read(prefix + "clutter_rate", clutter_rate);
    cfg.read(prefix + "unknown_rate", unknown_rate);
    cfg.read(prefix + "articulation", articulation);
    cfg.read(prefix + "misalignment", misalignment);
    cfg.read(prefix + "patch_size", patch_size);
    cfg.read(prefix + "train_size", train_size);
    cfg.read(prefix + "val_size", val_size);
    cfg.read(prefix + "test_size", test_size);
    cfg.read(prefix + "seed", seed);
  }
};

enum class SynthSplit { train = 0, val = 1, test = 2 };

inline std::string to_string(SynthSplit s) {
  switch (s) {
    case SynthSplit::train: return "train";
    case SynthSplit::val: return "val";
    case SynthSplit::test: return "test";
  }
  return "?";
}

namespace synth_detail {

using Rgb = std::array<double, 3>;

enum class GlyphKind { ring = 0, cross = 1, bar = 2 };

struct Glyph {
  GlyphKind kind;
  double u, v, r;
  Rgb color;
};

/// Maps canvas points to a part's local [-1, 1]^2 square.
struct Frame {
  double cx = 0, cy = 0, half = 1, theta = 0, xscale = 1;
  bool mirror = false;

  void to_local(double gx, double gy, double& u, double& v) const {
    const double dx = gx - cx, dy = gy - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    u = (dx * c + dy * s) / (half * xscale);
    v = (-dx * s + dy * c) / half;
    if (mirror) u = -u;
  }
  void to_canvas(double u, double v, double& gx, double& gy) const {
    if (mirror) u = -u;
    const double c = std::cos(theta), s = std::sin(theta);
    const double lx = u * half * xscale, ly = v * half;
    gx = cx + lx * c - ly * s;
    gy = cy + lx * s + ly * c;
  }
};

struct PartState {
  bool visible = true;
  Frame frame;
  Rgb color{};
  std::vector<Glyph> glyphs;
};

struct Scene {
  Rgb background{};
  double bg_freq = 0.1, bg_phase_x = 0, bg_phase_y = 0, bg_amp = 0.05;
  std::vector<PartState> parts;
};

struct CanonicalPart {
  double cx, cy, half;
};

/// Canonical frontal layout on a 64 x 128 canvas (scaled with patch size).
inline const std::array<CanonicalPart, SynthConfig::kMaxParts>& canonical_layout() {
  static const std::array<CanonicalPart, SynthConfig::kMaxParts> layout{{
      {32, 16, 12},   // head
      {32, 50, 16},   // torso
      {9, 50, 8},     // left arm
      {55, 50, 8},    // right arm
      {32, 88, 16},   // legs
      {32, 117, 9},   // feet
      {9, 76, 6},     // left hand
      {55, 76, 6},    // right hand
      {32, 31, 5},    // neck
      {20, 102, 6},   // left knee
      {44, 102, 6},   // right knee
      {32, 4, 4},     // crown
  }};
  return layout;
}

inline bool glyph_covers(const Glyph& g, double u, double v) {
  const double a = (u - g.u) / g.r, b = (v - g.v) / g.r;
  switch (g.kind) {
    case GlyphKind::ring: {
      const double rho = std::sqrt(a * a + b * b);
      return rho >= 0.55 && rho <= 1.0;
    }
    case GlyphKind::cross:
      return (std::abs(a) <= 0.28 && std::abs(b) <= 1.0) || (std::abs(b) <= 0.28 && std::abs(a) <= 1.0);
    case GlyphKind::bar:
      return std::abs(b) <= 0.32 && std::abs(a) <= 1.0;
  }
  return false;
}

/// Colour of a part at local coordinates, or false when outside the part.
inline bool part_color(const PartState& p, double u, double v, Rgb& out) {
  const double u2 = u * u, v2 = v * v;
  if (u2 * u2 + v2 * v2 > 1.0) return false;
  for (const auto& g : p.glyphs)
    if (glyph_covers(g, u, v)) {
      out = g.color;
      return true;
    }
  const double shade = 0.92 + 0.08 * v;
  for (int c = 0; c < 3; ++c) out[c] = p.color[c] * shade;
  return true;
}

inline Rgb background_color(const Scene& s, double gx, double gy) {
  const double t = s.bg_amp * std::sin(s.bg_freq * gx + s.bg_phase_x) * std::cos(s.bg_freq * gy + s.bg_phase_y);
  return {s.background[0] + t, s.background[1] + t, s.background[2] + t};
}

/// Frame::to_local with the trigonometry done once.
struct LocalMap {
  double cx, cy, c, s, inv_hu, inv_hv;
  bool mirror;

  explicit LocalMap(const Frame& f)
      : cx(f.cx), cy(f.cy), c(std::cos(f.theta)), s(std::sin(f.theta)), inv_hu(1.0 / (f.half * f.xscale)),
        inv_hv(1.0 / f.half), mirror(f.mirror) {}

  void to_local(double gx, double gy, double& u, double& v) const {
    const double dx = gx - cx, dy = gy - cy;
    u = (dx * c + dy * s) * inv_hu;
    v = (-dx * s + dy * c) * inv_hv;
    if (mirror) u = -u;
  }
};

inline std::vector<LocalMap> local_maps(const Scene& s) {
  std::vector<LocalMap> out;
  for (const auto& p : s.parts) out.emplace_back(p.frame);
  return out;
}

/// Full scene colour at a canvas point. Later parts are drawn on top.
inline Rgb scene_color(const Scene& s, const std::vector<LocalMap>& maps, double gx, double gy, int only_part = -1) {
  Rgb out = background_color(s, gx, gy);
  for (std::size_t k = 0; k < s.parts.size(); ++k) {
    if (only_part >= 0 && static_cast<int>(k) != only_part) continue;
    const auto& p = s.parts[k];
    if (!p.visible) continue;
    double u, v;
    maps[k].to_local(gx, gy, u, v);
    Rgb c;
    if (part_color(p, u, v, c)) out = c;
  }
  return out;
}

inline Rgb scene_color(const Scene& s, double gx, double gy, int only_part = -1) {
  return scene_color(s, local_maps(s), gx, gy, only_part);
}

/// Renders with 2x2 supersampling; `point(x, y)` maps pixel-space coordinates to the canvas.
template <class MapFn>
Tensor render(const Scene& s, std::size_t h, std::size_t w, int only_part, MapFn&& point) {
  Tensor img({3, h, w});
  const auto maps = local_maps(s);
  static constexpr double offs[2] = {0.25, 0.75};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      Rgb acc{0, 0, 0};
      for (double oy : offs)
        for (double ox : offs) {
          double gx, gy;
          point(static_cast<double>(x) + ox, static_cast<double>(y) + oy, gx, gy);
          const Rgb c = scene_color(s, maps, gx, gy, only_part);
          for (int ch = 0; ch < 3; ++ch) acc[ch] += 0.25 * c[ch];
        }
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) = acc[ch];
    }
  return img;
}

inline void add_noise(Tensor& img, double sd, Rng& rng) {
  if (sd > 0)
    for (auto& v : img.values()) v += sd * rng.normal();
  img = quantize_image(std::move(img));
}

inline double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2 * std::numbers::pi;
  while (a < -std::numbers::pi) a += 2 * std::numbers::pi;
  return a;
}

/// Alignment error between a detection frame and the part's true frame.
inline double alignment_error(const Frame& det, const Frame& truth) {
  const double dc = std::hypot(det.cx - truth.cx, det.cy - truth.cy) / truth.half;
  const double dr = std::abs(wrap_angle(det.theta - truth.theta));
  const double ds = std::abs(std::log(det.half / truth.half));
  const double dx = std::abs(std::log(truth.xscale));
  return dc / 0.3 + dr / 0.5 + ds / 0.25 + dx / 0.8;
}

inline Tensor render_patch(const Scene& s, const Frame& f, std::size_t size, int only_part) {
  constexpr double extent = 1.15;
  const double S = static_cast<double>(size);
  const double c = std::cos(f.theta), sn = std::sin(f.theta);
  const double hu = f.half * f.xscale * (f.mirror ? -1.0 : 1.0), hv = f.half;
  return render(s, size, size, only_part, [&](double px, double py, double& gx, double& gy) {
    const double lx = (2 * px / S - 1) * extent * hu, ly = (2 * py / S - 1) * extent * hv;
    gx = f.cx + lx * c - ly * sn;
    gy = f.cy + lx * sn + ly * c;
  });
}

inline Rgb random_rgb(Rng& rng, double lo, double hi) { return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)}; }

}  // namespace synth_detail

/// Generates one person. Depends only on (cfg, split, index).
inline Person synth_person(const SynthConfig& cfg, SynthSplit split, std::size_t index) {
  using namespace synth_detail;
  Rng rng(derive_seed(cfg.seed, (static_cast<std::uint64_t>(split) << 40) | index));
  const double unit = static_cast<double>(cfg.patch_size) / 64.0;
  const double W = 64 * unit, H = 128 * unit;

  Person person;
  person.id = to_string(split) + "-" + std::string(6 - std::min<std::size_t>(6, std::to_string(index + 1).size()), '0') +
              std::to_string(index + 1);
  person.box = {0, 0, W, H};

  const double r = rng.uniform();
  const Viewpoint pose = r < cfg.pose_distribution[0]                                 ? Viewpoint::frontal
                         : r < cfg.pose_distribution[0] + cfg.pose_distribution[1] ? Viewpoint::profile
                                                                                     : Viewpoint::back;
  person.viewpoint = pose;
  const auto pose_index = static_cast<std::size_t>(pose);

  Scene scene;
  const double bg = rng.uniform(0.6, 0.9);
  scene.background = {bg + rng.uniform(-0.05, 0.05), bg + rng.uniform(-0.05, 0.05), bg + rng.uniform(-0.05, 0.05)};
  scene.bg_freq = rng.uniform(0.05, 0.25) / unit;
  scene.bg_phase_x = rng.uniform(0, 2 * std::numbers::pi);
  scene.bg_phase_y = rng.uniform(0, 2 * std::numbers::pi);

  const double gscale = rng.uniform(0.9, 1.1);
  const double gtx = rng.uniform(-4, 4) * unit, gty = rng.uniform(-4, 4) * unit;
  const double art_offset = (pose == Viewpoint::frontal ? 2.0 : 3.0) * unit * cfg.articulation;
  const double art_rot = (pose == Viewpoint::frontal ? 0.15 : 0.22) * cfg.articulation;

  const auto& layout = canonical_layout();
  scene.parts.resize(cfg.parts);
  for (std::size_t k = 0; k < cfg.parts; ++k) {
    auto& p = scene.parts[k];
    p.visible = rng.bernoulli(cfg.visibility[pose_index]);
    double cx = layout[k].cx * unit, cy = layout[k].cy * unit;
    p.frame.xscale = 1.0;
    if (pose == Viewpoint::profile) {
      cx = W / 2 + (cx - W / 2) * 0.55;
      p.frame.xscale = 0.7;
    } else if (pose == Viewpoint::back) {
      cx = W - cx;
      p.frame.mirror = true;
    }
    cx = W / 2 + (cx - W / 2) * gscale + gtx + art_offset * rng.normal();
    cy = H / 2 + (cy - H / 2) * gscale + gty + art_offset * rng.normal();
    p.frame.cx = cx;
    p.frame.cy = cy;
    p.frame.half = layout[k].half * unit * gscale;
    p.frame.theta = art_rot * rng.normal();
    p.color = random_rgb(rng, 0.35, 0.8);
    if (rng.bernoulli(cfg.clutter_rate)) {
      const double cu = rng.bernoulli(0.5) ? 0.62 : -0.62, cv = rng.bernoulli(0.5) ? 0.62 : -0.62;
      p.glyphs.push_back({static_cast<GlyphKind>(rng.index(3)), cu, cv, 0.25, random_rgb(rng, 0.0, 0.15)});
    }
  }

  person.labels.resize(cfg.attributes);
  for (std::size_t a = 0; a < cfg.attributes; ++a) {
    const bool present = rng.bernoulli(cfg.prior(a));
    const bool extra_unknown = rng.bernoulli(cfg.unknown_rate);
    const Rgb ink = random_rgb(rng, 0.0, 0.15);
    const std::size_t host = a % cfg.parts;
    const std::size_t round = a / cfg.parts;
    auto& part = scene.parts[host];
    const bool observable = part.visible && !(pose == Viewpoint::back && host == 0);
    if (present && observable) {
      const double gv = round == 0 ? 0.0 : (round == 1 ? 0.6 : -0.6);
      part.glyphs.insert(part.glyphs.begin(), {static_cast<GlyphKind>(a % 3), 0.0, gv, round == 0 ? 0.42 : 0.25, ink});
    }
    person.labels[a] = !observable || extra_unknown ? Label::unknown : present ? Label::positive : Label::negative;
  }

  person.image = render(scene, static_cast<std::size_t>(H), static_cast<std::size_t>(W), -1,
                        [](double px, double py, double& gx, double& gy) {
                          gx = px;
                          gy = py;
                        });
  add_noise(person.image, cfg.glyph_noise, rng);

  const double mis_t = (pose == Viewpoint::frontal ? 0.05 : 0.09) * cfg.misalignment;
  const double mis_r = (pose == Viewpoint::frontal ? 0.06 : 0.1) * cfg.misalignment;
  const double mis_s = 0.05 * cfg.misalignment;
  for (std::size_t k = 0; k < cfg.parts; ++k) {
    const auto& truth = scene.parts[k].frame;
    const bool is_false = rng.bernoulli(cfg.false_activation_rate);
    const double noise = rng.uniform(0, cfg.score_noise);
    if (!is_false && !scene.parts[k].visible) continue;
    Frame det;
    int only = static_cast<int>(k);
    if (is_false) {
      det.cx = rng.uniform(0, W);
      det.cy = rng.uniform(0, H);
      det.half = truth.half * rng.uniform(0.7, 1.3);
      det.theta = rng.uniform(-0.5, 0.5);
      only = -1;
    } else {
      det.cx = truth.cx + mis_t * truth.half * rng.normal();
      det.cy = truth.cy + mis_t * truth.half * rng.normal();
      det.half = truth.half * std::exp(mis_s * rng.normal());
      det.theta = truth.theta + mis_r * rng.normal();
      det.mirror = truth.mirror;
    }
    double err = alignment_error(det, truth);
    if (!scene.parts[k].visible) err += 3.0;
    Tensor patch = render_patch(scene, det, cfg.patch_size, only);
    add_noise(patch, cfg.glyph_noise, rng);
    const double score = std::clamp(std::exp(-err) * (1 - noise), 0.0, 1.0);
    person.parts.push_back({static_cast<int>(k) + 1, score, std::move(patch)});
  }
  return person;
}

inline std::size_t split_size(const SynthConfig& cfg, SynthSplit split) {
  switch (split) {
    case SynthSplit::train: return cfg.train_size;
    case SynthSplit::val: return cfg.val_size;
    case SynthSplit::test: return cfg.test_size;
  }
  return 0;
}

/// Persons [first, first + count) of a split; identical for any `jobs`.
inline Dataset synth_range(const SynthConfig& cfg, SynthSplit split, std::size_t first, std::size_t count,
                           std::size_t jobs = 1) {
  cfg.validate();
  Dataset d;
  d.parts = cfg.parts;
  d.attributes = cfg.attribute_names();
  d.split = to_string(split);
  d.persons.resize(count);
  parallel_for(count, jobs, [&](std::size_t i) { d.persons[i] = synth_person(cfg, split, first + i); });
  return d;
}

inline Dataset synth_dataset(const SynthConfig& cfg, SynthSplit split, std::size_t jobs = 1) {
  return synth_range(cfg, split, 0, split_size(cfg, split), jobs);
}

/// Manifest describing `d` with images at images/<id>.ppm and patches at patches/<id>_p<k>.ppm.
inline Manifest dataset_manifest(const Dataset& d) {
  Manifest m;
  m.parts = d.parts;
  m.attributes = d.attributes;
  m.split = d.split;
  for (const auto& p : d.persons) {
    PersonRecord r;
    r.id = p.id;
    r.image = "images/" + p.id + ".ppm";
    r.box = p.box;
    r.viewpoint = p.viewpoint;
    r.labels = p.labels;
    for (const auto& part : p.parts)
      r.parts.push_back({part.part_id, part.score, "patches/" + p.id + "_p" + std::to_string(part.part_id) + ".ppm", std::nullopt});
    m.persons.push_back(std::move(r));
  }
  return m;
}

/// Writes a dataset (manifest + images) into `dir`, named <split>.manifest.
inline void write_dataset(const Dataset& d, const std::filesystem::path& dir, std::size_t jobs = 1) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "patches");
  const Manifest m = dataset_manifest(d);
  parallel_for(d.persons.size(), jobs, [&](std::size_t i) {
    const auto& p = d.persons[i];
    save_image(dir / m.persons[i].image, p.image);
    for (std::size_t j = 0; j < p.parts.size(); ++j) save_image(dir / m.persons[i].parts[j].patch_path, p.parts[j].patch);
  });
  save_manifest(m, dir / (d.split + ".manifest"));
}

/// Generates train/val/test splits into `out`. Files are staged in a sibling
/// directory and moved into place only after everything was written; on
/// failure the staging directory is removed and `out` is left untouched.
inline void synth_generate(const SynthConfig& cfg, const std::filesystem::path& out, std::size_t jobs = 1) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::path staging = out;
  staging += ".partial";
  std::error_code ec;
  fs::remove_all(staging, ec);
  try {
    fs::create_directories(staging);
    for (auto split : {SynthSplit::train, SynthSplit::val, SynthSplit::test})
      write_dataset(synth_dataset(cfg, split, jobs), staging, jobs);
    KvConfig snapshot;
    cfg.to_kv(snapshot);
    io::write_file_atomic(staging / "synth.cfg", std::string_view(snapshot.to_text()));
    fs::create_directories(out);
    for (const auto& entry : fs::directory_iterator(staging)) {
      const fs::path target = out / entry.path().filename();
      fs::remove_all(target);
      fs::rename(entry.path(), target);
    }
    fs::remove_all(staging);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(staging, ec);
    throw IoError(std::string("synth: ") + e.what());
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
}

}  // namespace panda
