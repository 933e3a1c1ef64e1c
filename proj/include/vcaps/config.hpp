#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vcaps/conv.hpp"
#include "vcaps/tensor.hpp"

// Flat key/value configuration text.
//
//   # comment
//   include base.cfg        (path relative to the including file; later keys override)
//   net.preset = tiny
//   conv.channels = 32, 64, 64, 64
//   caps1.kernel = 3x5x5
//
// Keys are case-sensitive; values are trimmed. Booleans accept true/false/1/0.
namespace vcaps {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text, const std::filesystem::path& base_dir = {}, int depth = 0) {
    Config c;
    c.merge_text(text, base_dir, "<text>", depth);
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    Config c;
    c.merge_file(path, 0);
    return c;
  }

  void set(const std::string& key, std::string value) { values_[key] = trim(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  // Later sources override earlier ones.
  void merge(const Config& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  template <typename N>
  N get_number(const std::string& key, N fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_number<N>(key, it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
  }

  template <typename N>
  std::vector<N> get_list(const std::string& key, std::vector<N> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<N> out;
    for (const auto& item : split(it->second, ',')) out.push_back(parse_number<N>(key, item));
    return out;
  }

  Dims3 get_dims(const std::string& key, Dims3 fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_dims(key, it->second);
  }

  std::vector<Dims3> get_dims_list(const std::string& key, std::vector<Dims3> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<Dims3> out;
    for (const auto& item : split(it->second, ',')) out.push_back(parse_dims(key, item));
    return out;
  }

  // Rejects keys outside `known`, naming the first offender.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }
  }

  // Sorted "key = value" lines; the hash input for checkpoints.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  std::uint64_t hash() const { return fnv1a64(canonical()); }

  template <typename N>
  static N parse_number(const std::string& key, const std::string& text) {
    N value{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) {
      throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
    }
    return value;
  }

  static Dims3 parse_dims(const std::string& key, const std::string& text) {
    const auto parts = split(text, 'x');
    if (parts.size() != 3) throw ConfigError("config key '" + key + "': expected TxHxW, got '" + text + "'");
    return {parse_number<std::size_t>(key, parts[0]), parse_number<std::size_t>(key, parts[1]),
            parse_number<std::size_t>(key, parts[2])};
  }

 private:
  void merge_file(const std::filesystem::path& path, int depth) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path.parent_path(), path.string(), depth);
  }

  void merge_text(std::string_view text, const std::filesystem::path& base_dir, const std::string& origin, int depth) {
    if (depth > 16) throw ConfigError("config include depth exceeds 16 at " + origin);
    std::size_t line_no = 0;
    for (const auto& raw : split(text, '\n')) {
      ++line_no;
      std::string line = trim(raw.substr(0, raw.find('#')));
      if (line.empty()) continue;
      if (line.rfind("include", 0) == 0 && (line.size() == 7 || line[7] == ' ' || line[7] == '\t')) {
        const std::string target = trim(line.substr(7));
        if (target.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": include needs a path");
        merge_file(base_dir / target, depth + 1);
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      values_[key] = trim(line.substr(eq + 1));
    }
  }

  std::map<std::string, std::string> values_;
};

inline std::string dims_text(const Dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

}  // namespace vcaps
