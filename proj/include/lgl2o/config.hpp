// SPDX-License-Identifier: Apache-2.0
#pragma once

// Sectioned key = value configuration files.
//
//   # comment            ; comment
//   [section]
//   key = value
//
// Keys are unique within a section; section names may repeat only if the
// file concatenates them (a second [section] header continues the first).

#include <algorithm>
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

#include "lgl2o/error.hpp"

namespace lgl2o {

struct ConfigEntry {
  std::string value;
  std::size_t line = 0;
};

class ConfigSection {
 public:
  ConfigSection() = default;
  ConfigSection(std::string name, std::size_t line) : name_(std::move(name)), line_(line) {}

  const std::string& name() const noexcept { return name_; }
  std::size_t line() const noexcept { return line_; }
  const std::map<std::string, ConfigEntry>& entries() const noexcept { return entries_; }

  void set(const std::string& key, std::string value, std::size_t line) {
    if (auto it = entries_.find(key); it != entries_.end()) {
      throw ConfigError("duplicate key '" + key + "' in [" + name_ + "] (first set on line " +
                            std::to_string(it->second.line) + ")",
                        line);
    }
    entries_[key] = {std::move(value), line};
  }

  bool has(const std::string& key) const { return entries_.contains(key); }

  const ConfigEntry& entry(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("missing key '" + key + "' in [" + name_ + "]", line_);
    return it->second;
  }

  std::string get(const std::string& key, const std::string& fallback) const {
    return has(key) ? entry(key).value : fallback;
  }
  std::string require(const std::string& key) const { return entry(key).value; }

  double get_double(const std::string& key, double fallback) const {
    return has(key) ? parse_double(entry(key)) : fallback;
  }
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? parse_uint(entry(key)) : fallback;
  }
  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto& e = entry(key);
    if (e.value == "true" || e.value == "yes" || e.value == "1" || e.value == "on") return true;
    if (e.value == "false" || e.value == "no" || e.value == "0" || e.value == "off") return false;
    throw ConfigError("'" + key + "' expects a boolean, got '" + e.value + "'", e.line);
  }
  std::vector<std::uint64_t> get_uint_list(const std::string& key, std::vector<std::uint64_t> fallback) const {
    if (!has(key)) return fallback;
    const auto& e = entry(key);
    std::vector<std::uint64_t> out;
    for (const auto& item : split_list(e.value)) out.push_back(parse_uint({item, e.line}, key));
    if (out.empty()) throw ConfigError("'" + key + "' expects a non-empty list", e.line);
    return out;
  }

  /// Rejects keys outside `known`, naming the line of the first offender.
  void expect_only(std::initializer_list<std::string_view> known) const {
    for (const auto& [key, e] : entries_) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ConfigError("unknown key '" + key + "' in [" + name_ + "]", e.line);
      }
    }
  }

  static std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

 private:
  double parse_double(const ConfigEntry& e) const {
    double v = 0.0;
    const char* end = e.value.data() + e.value.size();
    auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
    if (ec != std::errc{} || ptr != end) throw ConfigError("expected a number, got '" + e.value + "'", e.line);
    return v;
  }
  std::uint64_t parse_uint(const ConfigEntry& e, const std::string& key = {}) const {
    std::uint64_t v = 0;
    const char* end = e.value.data() + e.value.size();
    auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
    if (ec != std::errc{} || ptr != end) {
      throw ConfigError((key.empty() ? std::string() : "'" + key + "': ") + "expected a non-negative integer, got '" +
                            e.value + "'",
                        e.line);
    }
    return v;
  }

  std::string name_;
  std::size_t line_ = 0;
  std::map<std::string, ConfigEntry> entries_;
};

class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text) {
    ConfigFile cfg;
    ConfigSection* current = nullptr;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto nl = text.find('\n', start);
      const std::string_view raw = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
      start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
      ++line_no;

      std::string line = ConfigSection::trim(raw);
      if (line.empty() || line.front() == '#' || line.front() == ';') continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("section header is missing ']'", line_no);
        const std::string name = ConfigSection::trim(std::string_view(line).substr(1, line.size() - 2));
        if (name.empty()) throw ConfigError("empty section name", line_no);
        current = &cfg.section_or_create(name, line_no);
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("expected 'key = value', got '" + line + "'", line_no);
      if (!current) throw ConfigError("key outside of any [section]", line_no);
      std::string key = ConfigSection::trim(std::string_view(line).substr(0, eq));
      std::string value = ConfigSection::trim(std::string_view(line).substr(eq + 1));
      if (key.empty()) throw ConfigError("empty key", line_no);
      if (const auto hash = value.find(" #"); hash != std::string::npos) value = ConfigSection::trim(value.substr(0, hash));
      current->set(key, std::move(value), line_no);
    }
    return cfg;
  }

  static ConfigFile load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string(), 0);
    std::stringstream ss;
    ss << in.rdbuf();
    ConfigFile cfg = parse(ss.str());
    cfg.source_ = path;
    return cfg;
  }

  const std::filesystem::path& source() const noexcept { return source_; }

  bool has(const std::string& name) const {
    return std::any_of(sections_.begin(), sections_.end(), [&](const auto& s) { return s.name() == name; });
  }

  const ConfigSection& section(const std::string& name) const {
    for (const auto& s : sections_)
      if (s.name() == name) return s;
    throw ConfigError("missing section [" + name + "]", 0);
  }

  /// The named section, or an empty one.
  ConfigSection section_or_empty(const std::string& name) const { return has(name) ? section(name) : ConfigSection(name, 0); }

  /// Sections whose name starts with `prefix`, in file order.
  std::vector<const ConfigSection*> sections_with_prefix(std::string_view prefix) const {
    std::vector<const ConfigSection*> out;
    for (const auto& s : sections_)
      if (s.name().starts_with(prefix)) out.push_back(&s);
    return out;
  }

  const std::vector<ConfigSection>& sections() const noexcept { return sections_; }

  /// Rejects sections that are neither listed nor start with a listed prefix.
  void expect_sections(std::initializer_list<std::string_view> names, std::initializer_list<std::string_view> prefixes = {}) const {
    for (const auto& s : sections_) {
      const bool named = std::find(names.begin(), names.end(), s.name()) != names.end();
      const bool prefixed = std::any_of(prefixes.begin(), prefixes.end(), [&](std::string_view p) { return s.name().starts_with(p); });
      if (!named && !prefixed) throw ConfigError("unknown section [" + s.name() + "]", s.line());
    }
  }

 private:
  ConfigSection& section_or_create(const std::string& name, std::size_t line) {
    for (auto& s : sections_)
      if (s.name() == name) return s;
    sections_.emplace_back(name, line);
    return sections_.back();
  }

  std::vector<ConfigSection> sections_;
  std::filesystem::path source_;
};

}  // namespace lgl2o
