#pragma once

// Flat `key = value` configuration files. Keys are dotted
// (`subject.base_heart_rate`), `#` starts a comment, blank lines are
// ignored. Later assignments override earlier ones.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "nirsfb/error.hpp"

namespace nirsfb {

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view text) {
    KeyValueConfig cfg;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto eol = text.find('\n', pos);
      auto line = text.substr(pos, eol == std::string_view::npos ? text.size() - pos : eol - pos);
      pos = (eol == std::string_view::npos) ? text.size() + 1 : eol + 1;
      ++line_no;

      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;

      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(line_no) + ": expected key = value");
      }
      const auto key = trim(line.substr(0, eq));
      const auto value = trim(line.substr(eq + 1));
      if (key.empty()) {
        throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(line_no) + ": empty key");
      }
      cfg.values_[std::string(key)] = std::string(value);
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  [[nodiscard]] bool contains(const std::string& key) const { return values_.count(key) != 0; }

  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  [[nodiscard]] double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_number<double>(key, it->second);
  }

  [[nodiscard]] std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_number<std::int64_t>(key, it->second);
  }

  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& v = it->second;
    if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "off" || v == "0" || v == "no") return false;
    throw Error(ErrorCode::InvalidConfig, key + ": expected boolean, got '" + v + "'");
  }

  /// Comma or whitespace separated list of numbers.
  [[nodiscard]] std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::string token;
    std::stringstream ss(it->second);
    while (ss >> token) {
      std::stringstream parts(token);
      std::string piece;
      while (std::getline(parts, piece, ',')) {
        if (!piece.empty()) out.push_back(parse_number<double>(key, piece));
      }
    }
    return out;
  }

  [[nodiscard]] const std::map<std::string, std::string>& entries() const noexcept { return values_; }

 private:
  static std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
  }

  template <typename T>
  static T parse_number(const std::string& key, const std::string& text) {
    T value{};
    const auto* begin = text.data();
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc{} || ptr != end) {
      throw Error(ErrorCode::InvalidConfig, key + ": cannot parse '" + text + "' as a number");
    }
    return value;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace nirsfb
