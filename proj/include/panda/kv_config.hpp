#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "panda/binary_io.hpp"
#include "panda/error.hpp"

namespace panda {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  for (;;) {
    const auto p = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start)));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

/// Shortest round-trip decimal for a double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, std::string_view what) {
  s = trim(s);
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("invalid real for " + std::string(what) + ": '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s, std::string_view what) {
  s = trim(s);
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("invalid integer for " + std::string(what) + ": '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

/// Flat `key = value` text configuration. `#` starts a comment. Keys are looked up
/// through the typed getters, which record usage so unknown keys can be reported.
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse(std::string_view text, const std::string& source = "<config>") {
    KvConfig cfg;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto nl = text.find('\n', start);
      auto line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (!line.empty()) {
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
          throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key(detail::trim(line.substr(0, eq)));
        if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
        if (cfg.entries_.count(key))
          throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
        cfg.entries_[key] = std::string(detail::trim(line.substr(eq + 1)));
      }
      if (nl == std::string_view::npos) break;
      start = nl + 1;
    }
    return cfg;
  }

  static KvConfig load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return parse(std::string_view(bytes.data(), bytes.size()), path.string());
  }

  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  std::optional<std::string> get(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    used_.insert(key);
    return it->second;
  }

  void read(const std::string& key, double& out) const {
    if (auto v = get(key)) out = detail::parse_double(*v, key);
  }
  void read(const std::string& key, bool& out) const {
    if (auto v = get(key)) {
      if (*v == "true" || *v == "1") out = true;
      else if (*v == "false" || *v == "0") out = false;
      else throw ConfigError("invalid boolean for " + key + ": '" + *v + "'");
    }
  }
  void read(const std::string& key, std::string& out) const {
    if (auto v = get(key)) out = *v;
  }
  template <class Int>
    requires std::is_integral_v<Int>
  void read(const std::string& key, Int& out) const {
    if (auto v = get(key)) {
      const auto parsed = detail::parse_int(*v, key);
      if constexpr (std::is_unsigned_v<Int>)
        if (parsed < 0) throw ConfigError(key + " must be non-negative");
      out = static_cast<Int>(parsed);
    }
  }
  void read(const std::string& key, std::vector<double>& out) const {
    if (auto v = get(key)) {
      out.clear();
      for (const auto& item : detail::split(*v, ',')) out.push_back(detail::parse_double(item, key));
    }
  }
  template <class Int>
    requires std::is_integral_v<Int>
  void read(const std::string& key, std::vector<Int>& out) const {
    if (auto v = get(key)) {
      out.clear();
      for (const auto& item : detail::split(*v, ',')) out.push_back(static_cast<Int>(detail::parse_int(item, key)));
    }
  }

  /// Keys present in the file that no getter asked for.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  /// Canonical text: sorted keys, one `key = value` per line.
  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
  mutable std::set<std::string> used_;
};

/// Builds the value strings used by to_kv() methods.
inline std::string kv_value(double v) { return detail::format_double(v); }
inline std::string kv_value(bool v) { return v ? "true" : "false"; }
inline std::string kv_value(const std::string& v) { return v; }
template <class Int>
  requires std::is_integral_v<Int>
inline std::string kv_value(Int v) {
  return std::to_string(v);
}
template <class T>
inline std::string kv_value(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += kv_value(v[i]);
  }
  return out;
}

}  // namespace panda
