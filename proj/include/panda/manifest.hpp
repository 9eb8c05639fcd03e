#pragma once

// Dataset manifest: a line-oriented text file describing persons, their global
// image, tri-state attribute labels and part detections.
//
//   panda-manifest 1
//   parts <K>
//   attributes <name> <name> ...
//   split <tag>
//   person <id> <image> <x> <y> <w> <h> <viewpoint|-> <labels>
//   part <k> <score> patch <path>
//   part <k> <score> crop <x> <y> <w> <h>
//
// `labels` has one character per attribute: '+', '-' or '?'. Part lines belong
// to the preceding person line. Blank lines and lines starting with '#' are
// ignored. Paths are relative to the manifest's directory and may not contain
// whitespace. format_manifest writes the canonical form, so a canonical file
// re-serializes byte for byte.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "panda/binary_io.hpp"
#include "panda/error.hpp"
#include "panda/image.hpp"
#include "panda/kv_config.hpp"
#include "panda/net.hpp"
#include "panda/parallel.hpp"

namespace panda {

enum class Viewpoint { frontal, profile, back };

inline std::string to_string(Viewpoint v) {
  switch (v) {
    case Viewpoint::frontal: return "frontal";
    case Viewpoint::profile: return "profile";
    case Viewpoint::back: return "back";
  }
  return "?";
}

inline std::optional<Viewpoint> viewpoint_from_string(std::string_view s) {
  if (s == "frontal") return Viewpoint::frontal;
  if (s == "profile") return Viewpoint::profile;
  if (s == "back") return Viewpoint::back;
  return std::nullopt;
}

struct PartRecord {
  int part_id = 1;
  double score = 0;
  /// Either a patch file or a crop box on the global image.
  std::string patch_path;
  std::optional<BoundingBox> crop;
  friend bool operator==(const PartRecord&, const PartRecord&) = default;
};

struct PersonRecord {
  std::string id;
  std::string image;
  BoundingBox box;
  std::optional<Viewpoint> viewpoint;
  AttributeLabel labels;
  std::vector<PartRecord> parts;
  friend bool operator==(const PersonRecord&, const PersonRecord&) = default;
};

struct Manifest {
  int version = 1;
  std::size_t parts = 0;
  std::vector<std::string> attributes;
  std::string split;
  std::vector<PersonRecord> persons;
  /// Directory relative paths resolve against; not serialized.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& rel) const { return base_dir / rel; }
};

inline constexpr std::string_view kManifestHeader = "panda-manifest";
inline constexpr int kManifestVersion = 1;

namespace detail {

inline std::vector<std::string> words(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
    if (i > start) out.emplace_back(line.substr(start, i - start));
  }
  return out;
}

inline bool is_token(const std::string& s) {
  return !s.empty() && std::none_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; });
}

class ManifestParser {
 public:
  explicit ManifestParser(std::string_view source) : source_(source) {}

  [[noreturn]] void fail(std::size_t line, const std::string& msg) const {
    std::string where = std::string(source_) + ":" + std::to_string(line);
    if (record_ > 0) where += ": record " + std::to_string(record_);
    throw SchemaError(where + ": " + msg);
  }

  double number(const std::string& s, std::size_t line, const std::string& field) const {
    try {
      return parse_double(s, field);
    } catch (const Error&) {
      fail(line, "field " + field + ": not a number: '" + s + "'");
    }
  }

  Manifest parse(std::string_view text) {
    Manifest m;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    int header_stage = 0;
    while (pos <= text.size()) {
      const std::size_t nl = text.find('\n', pos);
      std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
      ++line_no;
      if (!raw.empty() && raw.back() == '\r') raw.remove_suffix(1);
      const auto w = words(raw);
      if (w.empty() || w[0][0] == '#') continue;
      if (header_stage < 4) {
        parse_header(m, w, line_no, header_stage);
        ++header_stage;
        continue;
      }
      if (w[0] == "person") {
        ++record_;
        m.persons.push_back(parse_person(m, w, line_no));
      } else if (w[0] == "part") {
        if (m.persons.empty()) fail(line_no, "part line before any person line");
        m.persons.back().parts.push_back(parse_part(m, w, line_no));
      } else {
        fail(line_no, "unknown line kind '" + w[0] + "'");
      }
    }
    if (header_stage < 4) fail(line_no, "incomplete header (need panda-manifest, parts, attributes, split)");
    return m;
  }

 private:
  void parse_header(Manifest& m, const std::vector<std::string>& w, std::size_t line, int stage) {
    static const char* expect[] = {"panda-manifest", "parts", "attributes", "split"};
    if (w[0] != expect[stage]) fail(line, std::string("expected header line '") + expect[stage] + "'");
    switch (stage) {
      case 0: {
        if (w.size() != 2) fail(line, "header: expected 'panda-manifest <version>'");
        const auto v = number(w[1], line, "version");
        if (v != kManifestVersion) throw VersionError("manifest version " + w[1] + " unsupported (expected " + std::to_string(kManifestVersion) + ")");
        m.version = kManifestVersion;
        break;
      }
      case 1: {
        if (w.size() != 2) fail(line, "header: expected 'parts <K>'");
        const auto k = number(w[1], line, "parts");
        if (!(k >= 1) || k != static_cast<double>(static_cast<long long>(k))) fail(line, "field parts: must be a positive integer");
        m.parts = static_cast<std::size_t>(k);
        break;
      }
      case 2: {
        m.attributes.assign(w.begin() + 1, w.end());
        if (m.attributes.empty()) fail(line, "field attributes: list is empty");
        std::set<std::string> seen;
        for (const auto& a : m.attributes)
          if (!seen.insert(a).second) fail(line, "field attributes: duplicate name '" + a + "'");
        break;
      }
      case 3:
        if (w.size() != 2) fail(line, "header: expected 'split <tag>'");
        m.split = w[1];
        break;
    }
  }

  PersonRecord parse_person(const Manifest& m, const std::vector<std::string>& w, std::size_t line) {
    if (w.size() != 9) fail(line, "person line needs 8 fields, got " + std::to_string(w.size() - 1));
    PersonRecord p;
    p.id = w[1];
    if (!ids_.insert(p.id).second) fail(line, "field id: duplicate person id '" + p.id + "'");
    p.image = w[2];
    p.box = {number(w[3], line, "x"), number(w[4], line, "y"), number(w[5], line, "w"), number(w[6], line, "h")};
    if (!(p.box.w > 0 && p.box.h > 0)) fail(line, "field box: width and height must be positive");
    if (w[7] != "-") {
      p.viewpoint = viewpoint_from_string(w[7]);
      if (!p.viewpoint) fail(line, "field viewpoint: '" + w[7] + "' is not frontal, profile, back or -");
    }
    const std::string& lab = w[8];
    if (lab.size() != m.attributes.size())
      fail(line, "field labels: " + std::to_string(lab.size()) + " states for " + std::to_string(m.attributes.size()) + " attributes");
    for (char c : lab) {
      try {
        p.labels.push_back(label_from_char(c));
      } catch (const Error&) {
        fail(line, std::string("field labels: invalid state '") + c + "'");
      }
    }
    return p;
  }

  PartRecord parse_part(const Manifest& m, const std::vector<std::string>& w, std::size_t line) {
    if (w.size() < 4) fail(line, "part line too short");
    PartRecord r;
    const double k = number(w[1], line, "part_id");
    if (k != static_cast<double>(static_cast<long long>(k)) || k < 1 || k > static_cast<double>(m.parts))
      fail(line, "field part_id: " + w[1] + " outside [1, " + std::to_string(m.parts) + "]");
    r.part_id = static_cast<int>(k);
    r.score = number(w[2], line, "score");
    if (!(r.score >= 0 && r.score <= 1)) fail(line, "field score: " + w[2] + " outside [0, 1]");
    if (w[3] == "patch") {
      if (w.size() != 5) fail(line, "part patch line needs a single path");
      r.patch_path = w[4];
    } else if (w[3] == "crop") {
      if (w.size() != 8) fail(line, "part crop line needs x y w h");
      r.crop = BoundingBox{number(w[4], line, "crop.x"), number(w[5], line, "crop.y"), number(w[6], line, "crop.w"),
                           number(w[7], line, "crop.h")};
      if (!(r.crop->w > 0 && r.crop->h > 0)) fail(line, "field crop: width and height must be positive");
    } else {
      fail(line, "field source: expected 'patch' or 'crop', got '" + w[3] + "'");
    }
    return r;
  }

  std::string_view source_;
  std::size_t record_ = 0;
  std::set<std::string> ids_;
};

}  // namespace detail

/// Parses and validates manifest text. Paths are not checked.
inline Manifest parse_manifest(std::string_view text, std::string_view source = "<manifest>") {
  return detail::ManifestParser(source).parse(text);
}

inline std::vector<std::string> missing_paths(const Manifest& m) {
  std::vector<std::string> missing;
  auto check = [&](const std::string& rel) {
    if (!std::filesystem::is_regular_file(m.resolve(rel))) missing.push_back(rel);
  };
  for (const auto& p : m.persons) {
    check(p.image);
    for (const auto& part : p.parts)
      if (!part.crop) check(part.patch_path);
  }
  return missing;
}

/// Reads, validates and (optionally) checks that every referenced file exists.
inline Manifest load_manifest(const std::filesystem::path& path, bool check_paths = true) {
  const auto bytes = io::read_file(path);
  Manifest m = parse_manifest(std::string_view(bytes.data(), bytes.size()), path.string());
  m.base_dir = path.parent_path();
  if (check_paths) {
    const auto missing = missing_paths(m);
    if (!missing.empty()) {
      std::string msg = path.string() + ": " + std::to_string(missing.size()) + " missing path(s):";
      for (const auto& s : missing) msg += " " + s;
      throw SchemaError(msg);
    }
  }
  return m;
}

inline std::string format_manifest(const Manifest& m) {
  using detail::format_double;
  auto token = [](const std::string& s, const char* what) {
    if (!detail::is_token(s)) throw InvalidArgument(std::string("manifest ") + what + " must be a nonempty token without whitespace: '" + s + "'");
    return s;
  };
  std::string out = std::string(kManifestHeader) + " " + std::to_string(kManifestVersion) + "\n";
  out += "parts " + std::to_string(m.parts) + "\n";
  out += "attributes";
  for (const auto& a : m.attributes) out += " " + token(a, "attribute name");
  out += "\nsplit " + token(m.split, "split tag") + "\n";
  for (const auto& p : m.persons) {
    std::string labels;
    for (auto l : p.labels) labels += label_char(l);
    out += "person " + token(p.id, "person id") + " " + token(p.image, "image path") + " " + format_double(p.box.x) + " " +
           format_double(p.box.y) + " " + format_double(p.box.w) + " " + format_double(p.box.h) + " " +
           (p.viewpoint ? to_string(*p.viewpoint) : std::string("-")) + " " + labels + "\n";
    for (const auto& r : p.parts) {
      out += "part " + std::to_string(r.part_id) + " " + format_double(r.score);
      if (r.crop)
        out += " crop " + format_double(r.crop->x) + " " + format_double(r.crop->y) + " " + format_double(r.crop->w) + " " +
               format_double(r.crop->h) + "\n";
      else
        out += " patch " + token(r.patch_path, "patch path") + "\n";
    }
  }
  return out;
}

/// Writes after validating that the text parses back to the same records.
inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  const std::string text = format_manifest(m);
  parse_manifest(text, path.string());
  io::write_file_atomic(path, std::string_view(text));
}

// In-memory dataset with decoded pixels.

struct PartObservation {
  int part_id = 1;
  double score = 0;
  Tensor patch;  // [3, S, S]
};

struct Person {
  std::string id;
  Tensor image;  // [3, H, W]
  BoundingBox box;
  std::optional<Viewpoint> viewpoint;
  AttributeLabel labels;
  std::vector<PartObservation> parts;
};

struct Dataset {
  std::size_t parts = 0;
  std::vector<std::string> attributes;
  std::string split;
  std::vector<Person> persons;
};

/// Decodes every image and patch referenced by `m`. Crop-box parts are
/// resampled from the global image to patch_size x patch_size.
inline Dataset load_dataset(const Manifest& m, std::size_t patch_size = 64, std::size_t jobs = 1) {
  Dataset d;
  d.parts = m.parts;
  d.attributes = m.attributes;
  d.split = m.split;
  d.persons.resize(m.persons.size());
  parallel_for(m.persons.size(), jobs, [&](std::size_t i) {
    const PersonRecord& r = m.persons[i];
    Person& p = d.persons[i];
    p.id = r.id;
    p.image = load_image(m.resolve(r.image));
    p.box = r.box;
    p.viewpoint = r.viewpoint;
    p.labels = r.labels;
    for (const auto& part : r.parts) {
      Tensor patch = part.crop ? crop_resize(p.image, *part.crop, patch_size, patch_size) : load_image(m.resolve(part.patch_path));
      if (patch.dim(1) != patch_size || patch.dim(2) != patch_size)
        patch = crop_resize(patch, {0, 0, static_cast<double>(patch.dim(2)), static_cast<double>(patch.dim(1))}, patch_size, patch_size);
      p.parts.push_back({part.part_id, part.score, std::move(patch)});
    }
  });
  return d;
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path, std::size_t patch_size = 64, std::size_t jobs = 1) {
  return load_dataset(load_manifest(manifest_path), patch_size, jobs);
}

}  // namespace panda
