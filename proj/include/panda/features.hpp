#pragma once

// Pose-normalized person representation: the trunk tap of part net k on the
// person's best activation of part k fills slots [(k-1) W, k W), absent parts
// stay exactly zero, and the holistic net's trunk tap fills the final G slots.
//
// Feature file, little-endian:
//
//   "PANDAFEA"            8-byte magic
//   u32 format version    (= 1)
//   u32 K                 part count
//   u32 W                 part trunk width
//   u32 G                 global width
//   u32 flags             bit 0: per-block L2 normalization
//   u32 A                 attribute count, then A strings (u32 length + bytes)
//   u64 N                 person count, then per person:
//       string id, u8 viewpoint (0 none, 1 frontal, 2 profile, 3 back),
//       string labels ('+', '-', '?' per attribute), f64 values[K W + G]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "panda/binary_io.hpp"
#include "panda/error.hpp"
#include "panda/image.hpp"
#include "panda/manifest.hpp"
#include "panda/net.hpp"
#include "panda/parallel.hpp"
#include "panda/tensor.hpp"

namespace panda {

struct PartActivation {
  Tensor patch;
  double score = 0;
};

struct PartActivationSet {
  std::string person_id;
  /// Index k - 1 holds part k.
  std::vector<std::optional<PartActivation>> parts;
  std::optional<Viewpoint> viewpoint;

  /// Keeps the highest-scoring activation per part id (the first one on ties).
  static PartActivationSet from_person(const Person& p, std::size_t part_count) {
    PartActivationSet s;
    s.person_id = p.id;
    s.viewpoint = p.viewpoint;
    s.parts.resize(part_count);
    for (const auto& obs : p.parts) {
      if (obs.part_id < 1 || static_cast<std::size_t>(obs.part_id) > part_count)
        throw SchemaError("person " + p.id + ": part id " + std::to_string(obs.part_id) + " outside [1, " +
                          std::to_string(part_count) + "]");
      auto& slot = s.parts[static_cast<std::size_t>(obs.part_id - 1)];
      if (!slot || obs.score > slot->score) slot = PartActivation{obs.patch, obs.score};
    }
    return s;
  }
};

struct FeatureLayout {
  std::size_t parts = 0;
  std::size_t trunk_width = 576;
  std::size_t global_width = 0;
  bool l2_normalize = false;

  std::size_t part_block() const { return parts * trunk_width; }
  std::size_t length() const { return part_block() + global_width; }
  std::size_t part_offset(int part_id) const { return static_cast<std::size_t>(part_id - 1) * trunk_width; }

  std::uint64_t hash() const {
    const std::string key = "panda-layout:" + std::to_string(parts) + ":" + std::to_string(trunk_width) + ":" +
                            std::to_string(global_width) + ":" + (l2_normalize ? "l2" : "raw");
    return io::fnv1a(key);
  }
  friend bool operator==(const FeatureLayout&, const FeatureLayout&) = default;
};

/// Builds the [4 S', S, S] stacked holistic input: square windows of side w at
/// the top, centre and bottom of the box, then the whole box scaled to fit an
/// S x S canvas (half resolution for a 1:2 box) and zero padded. S' = channels
/// of the image (3 for RGB, giving 12 channels).
inline Tensor holistic_input(const Tensor& image, const BoundingBox& box, std::size_t size = 64) {
  if (!(box.w > 0 && box.h > 0)) throw InvalidArgument("holistic input: bounding box has zero area");
  if (image.rank() != 3) throw InvalidArgument("holistic input expects [C,H,W], got " + shape_string(image.shape()));
  const std::size_t C = image.dim(0);
  const double side = box.w;
  const BoundingBox windows[3] = {{box.x, box.y, side, side},
                                  {box.x, box.y + box.h / 2 - side / 2, side, side},
                                  {box.x, box.y + box.h - side, side, side}};
  Tensor out({4 * C, size, size});
  const std::size_t plane = size * size;
  for (std::size_t w = 0; w < 3; ++w) {
    const Tensor crop = crop_resize(image, windows[w], size, size);
    std::copy(crop.raw(), crop.raw() + C * plane, out.raw() + w * C * plane);
  }
  const double scale = static_cast<double>(size) / std::max(box.w, box.h);
  const auto fit_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(box.w * scale)));
  const auto fit_h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(box.h * scale)));
  const Tensor full = crop_resize(image, box, fit_h, fit_w);
  const std::size_t oy = (size - fit_h) / 2, ox = (size - fit_w) / 2;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < fit_h; ++y)
      for (std::size_t x = 0; x < fit_w; ++x) out.at(3 * C + c, oy + y, ox + x) = full.at(c, y, x);
  return out;
}

inline void check_part_nets(const std::map<int, Network>& nets, const FeatureLayout& layout,
                            const std::vector<int>& needed) {
  std::vector<int> missing;
  for (int k : needed)
    if (!nets.count(k)) missing.push_back(k);
  if (!missing.empty()) {
    std::string msg = "no trained net for part id(s):";
    for (int k : missing) msg += " " + std::to_string(k);
    throw ConfigError(msg);
  }
  for (const auto& [k, net] : nets)
    if (net.spec.trunk_fc_units != layout.trunk_width)
      throw LayoutError("part net " + std::to_string(k) + " has trunk width " + std::to_string(net.spec.trunk_fc_units) +
                        ", layout expects " + std::to_string(layout.trunk_width));
}

/// Part block of one person: K W values, zero for absent parts.
inline std::vector<double> extract_part_features(const std::map<int, Network>& nets, const PartActivationSet& acts,
                                                 const FeatureLayout& layout) {
  if (acts.parts.size() != layout.parts)
    throw LayoutError("activation set has " + std::to_string(acts.parts.size()) + " parts, layout expects " +
                      std::to_string(layout.parts));
  std::vector<int> present;
  for (std::size_t k = 0; k < acts.parts.size(); ++k)
    if (acts.parts[k]) present.push_back(static_cast<int>(k) + 1);
  check_part_nets(nets, layout, present);
  std::vector<double> block(layout.part_block(), 0.0);
  for (int k : present) {
    const Tensor tap = tap_activation(nets.at(k), acts.parts[static_cast<std::size_t>(k - 1)]->patch);
    std::copy(tap.raw(), tap.raw() + tap.size(), block.begin() + static_cast<std::ptrdiff_t>(layout.part_offset(k)));
  }
  return block;
}

/// Holistic trunk tap for one person.
inline std::vector<double> extract_global_features(const Network& holistic, const Tensor& image, const BoundingBox& box) {
  const Tensor tap = tap_activation(holistic, holistic_input(image, box, holistic.spec.height));
  return {tap.values().begin(), tap.values().end()};
}

inline void l2_normalize_block(std::span<double> block) {
  double ss = 0;
  for (double v : block) ss += v * v;
  if (ss > 0) {
    const double inv = 1.0 / std::sqrt(ss);
    for (double& v : block) v *= inv;
  }
}

/// Parts first, global last; optionally L2-normalizes each part block and the global block.
inline std::vector<double> assemble(const std::vector<double>& part_block, const std::vector<double>& global_block,
                                    const FeatureLayout& layout) {
  if (part_block.size() != layout.part_block())
    throw LayoutError("part block has " + std::to_string(part_block.size()) + " values, layout expects " +
                      std::to_string(layout.part_block()));
  if (global_block.size() != layout.global_width)
    throw LayoutError("global block has " + std::to_string(global_block.size()) + " values, layout expects " +
                      std::to_string(layout.global_width));
  std::vector<double> out(part_block);
  out.insert(out.end(), global_block.begin(), global_block.end());
  if (layout.l2_normalize) {
    for (std::size_t k = 0; k < layout.parts; ++k)
      l2_normalize_block(std::span<double>(out).subspan(k * layout.trunk_width, layout.trunk_width));
    if (layout.global_width) l2_normalize_block(std::span<double>(out).subspan(layout.part_block(), layout.global_width));
  }
  return out;
}

struct FeatureSet {
  FeatureLayout layout;
  std::vector<std::string> attributes;
  std::vector<std::string> ids;
  std::vector<std::optional<Viewpoint>> viewpoints;
  std::vector<AttributeLabel> labels;
  std::vector<std::vector<double>> values;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const FeatureSet&, const FeatureSet&) = default;
};

/// Features for every person of `data`. Forwards are batched per part net;
/// results do not depend on `jobs` or on person order.
inline FeatureSet extract_features(const std::map<int, Network>& part_nets, const Network* holistic, const Dataset& data,
                                   const FeatureLayout& layout, std::size_t jobs = 1, std::size_t batch = 32) {
  if (layout.parts != 0 && layout.parts != data.parts)
    throw LayoutError("layout has " + std::to_string(layout.parts) + " parts, dataset has " + std::to_string(data.parts));
  if ((holistic != nullptr) != (layout.global_width > 0))
    throw LayoutError("global width " + std::to_string(layout.global_width) +
                      (holistic ? " but a holistic net was given" : " requires a holistic net"));
  if (holistic && holistic->spec.trunk_fc_units != layout.global_width)
    throw LayoutError("holistic trunk width " + std::to_string(holistic->spec.trunk_fc_units) + " differs from layout G " +
                      std::to_string(layout.global_width));
  const std::size_t N = data.persons.size();
  FeatureSet fs;
  fs.layout = layout;
  fs.attributes = data.attributes;
  std::vector<PartActivationSet> acts;
  for (const auto& p : data.persons) {
    fs.ids.push_back(p.id);
    fs.viewpoints.push_back(p.viewpoint);
    fs.labels.push_back(p.labels);
    acts.push_back(PartActivationSet::from_person(p, data.parts));
  }
  std::vector<std::vector<double>> part_blocks(N, std::vector<double>(layout.part_block(), 0.0));
  std::vector<std::vector<double>> global_blocks(N);

  std::vector<int> present;
  for (std::size_t k = 0; k < layout.parts; ++k)
    for (const auto& a : acts)
      if (a.parts[k]) {
        present.push_back(static_cast<int>(k) + 1);
        break;
      }
  check_part_nets(part_nets, layout, present);

  // One task per (part, batch) or (holistic, batch).
  struct Task {
    int part;  // 0 = holistic
    std::vector<std::size_t> persons;
  };
  std::vector<Task> tasks;
  for (int k : present) {
    Task t{k, {}};
    for (std::size_t i = 0; i < N; ++i)
      if (acts[i].parts[static_cast<std::size_t>(k - 1)]) {
        t.persons.push_back(i);
        if (t.persons.size() == batch) {
          tasks.push_back(t);
          t.persons.clear();
        }
      }
    if (!t.persons.empty()) tasks.push_back(t);
  }
  if (holistic)
    for (std::size_t start = 0; start < N; start += batch) {
      Task t{0, {}};
      for (std::size_t i = start; i < std::min(N, start + batch); ++i) t.persons.push_back(i);
      tasks.push_back(t);
    }

  parallel_for(tasks.size(), jobs, [&](std::size_t ti) {
    const Task& t = tasks[ti];
    std::vector<Tensor> inputs;
    for (std::size_t i : t.persons) {
      if (t.part == 0) {
        const auto& p = data.persons[i];
        inputs.push_back(holistic_input(p.image, p.box, holistic->spec.height));
      } else {
        inputs.push_back(acts[i].parts[static_cast<std::size_t>(t.part - 1)]->patch);
      }
    }
    const Network& net = t.part == 0 ? *holistic : part_nets.at(t.part);
    const Tensor taps = tap_activations(net, stack(inputs));
    const std::size_t width = taps.dim(1);
    for (std::size_t j = 0; j < t.persons.size(); ++j) {
      const double* row = taps.raw() + j * width;
      if (t.part == 0) {
        global_blocks[t.persons[j]].assign(row, row + width);
      } else {
        auto& block = part_blocks[t.persons[j]];
        std::copy(row, row + width, block.begin() + static_cast<std::ptrdiff_t>(layout.part_offset(t.part)));
      }
    }
  });
  for (std::size_t i = 0; i < N; ++i) fs.values.push_back(assemble(part_blocks[i], global_blocks[i], layout));
  return fs;
}

/// The global block alone, as extract_features would produce it with a
/// parts-free layout (blocks are normalized independently).
inline FeatureSet global_features(const FeatureSet& fs) {
  if (fs.layout.global_width == 0) throw LayoutError("feature set has no global block");
  FeatureSet out = fs;
  out.layout.parts = 0;
  const auto offset = static_cast<std::ptrdiff_t>(fs.layout.part_block());
  for (auto& v : out.values) v.erase(v.begin(), v.begin() + offset);
  return out;
}

inline constexpr std::string_view kFeatureMagic = "PANDAFEA";
inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::vector<char> serialize_features(const FeatureSet& fs) {
  io::ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(fs.layout.parts));
  w.u32(static_cast<std::uint32_t>(fs.layout.trunk_width));
  w.u32(static_cast<std::uint32_t>(fs.layout.global_width));
  w.u32(fs.layout.l2_normalize ? 1u : 0u);
  w.u32(static_cast<std::uint32_t>(fs.attributes.size()));
  for (const auto& a : fs.attributes) w.string(a);
  w.u64(fs.size());
  const std::size_t len = fs.layout.length();
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (fs.values[i].size() != len)
      throw LayoutError("feature vector " + std::to_string(i) + " has " + std::to_string(fs.values[i].size()) +
                        " values, layout expects " + std::to_string(len));
    if (fs.labels[i].size() != fs.attributes.size()) throw LayoutError("label record " + std::to_string(i) + " has the wrong length");
    w.string(fs.ids[i]);
    w.u8(static_cast<std::uint8_t>(fs.viewpoints[i] ? static_cast<int>(*fs.viewpoints[i]) + 1 : 0));
    std::string lab;
    for (auto l : fs.labels[i]) lab += label_char(l);
    w.string(lab);
    w.f64_array(fs.values[i]);
  }
  return w.buffer();
}

inline FeatureSet deserialize_features(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes));
  r.expect_bytes(kFeatureMagic, "feature file magic");
  const auto version = r.u32("format version");
  if (version != kFeatureVersion)
    throw VersionError("feature file version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kFeatureVersion) + ")");
  FeatureSet fs;
  fs.layout.parts = r.u32("part count");
  fs.layout.trunk_width = r.u32("trunk width");
  fs.layout.global_width = r.u32("global width");
  const auto flags_at = r.offset();
  const auto flags = r.u32("flags");
  if (flags > 1) throw FormatError("unknown feature file flags " + std::to_string(flags), flags_at);
  fs.layout.l2_normalize = flags & 1u;
  const auto A = r.u32("attribute count");
  for (std::uint32_t a = 0; a < A; ++a) fs.attributes.push_back(r.string("attribute name"));
  const auto N = r.u64("person count");
  const std::size_t len = fs.layout.length();
  for (std::uint64_t i = 0; i < N; ++i) {
    fs.ids.push_back(r.string("person id"));
    const std::size_t vp_at = r.offset();
    const auto vp = r.u8("viewpoint");
    if (vp > 3) throw FormatError("invalid viewpoint code " + std::to_string(vp), vp_at);
    fs.viewpoints.push_back(vp == 0 ? std::nullopt : std::optional<Viewpoint>(static_cast<Viewpoint>(vp - 1)));
    const std::size_t lab_at = r.offset();
    const std::string lab = r.string("labels");
    if (lab.size() != A)
      throw FormatError("label record length " + std::to_string(lab.size()) + " for " + std::to_string(A) + " attributes",
                        lab_at);
    AttributeLabel labels;
    for (char c : lab) {
      if (c != '+' && c != '-' && c != '?') throw FormatError(std::string("invalid label state '") + c + "'", lab_at);
      labels.push_back(label_from_char(c));
    }
    fs.labels.push_back(std::move(labels));
    std::vector<double> values(len);
    r.f64_array(values, "feature values");
    fs.values.push_back(std::move(values));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after feature records", r.offset());
  return fs;
}

inline void save_features(const FeatureSet& fs, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_features(fs));
}

inline FeatureSet load_features(const std::filesystem::path& path) { return deserialize_features(io::read_file(path)); }

}  // namespace panda
