#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "omni/error.hpp"

namespace omni {

// Flat `section.key=value` store. Lines starting with '#' and blank lines are
// ignored; later assignments override earlier ones.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& origin = "config") {
    KeyValues kv;
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      auto end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      auto line = trim(text.substr(pos, end - pos));
      ++line_no;
      pos = end + 1;
      if (line.empty() || line.front() == '#') continue;
      auto eq = line.find('=');
      if (eq == std::string_view::npos) fail(origin + ":" + std::to_string(line_no) + ": expected key=value");
      auto key = trim(line.substr(0, eq));
      auto val = trim(line.substr(eq + 1));
      if (key.empty()) fail(origin + ":" + std::to_string(line_no) + ": empty key");
      kv.set(std::string(key), std::string(val));
    }
    return kv;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  std::string get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) fail("missing config key '" + key + "'");
    return it->second;
  }

  template <class N>
  N number(const std::string& key, N fallback) const {
    return has(key) ? parse_number<N>(key, get(key)) : fallback;
  }
  template <class N>
  N number(const std::string& key) const {
    return parse_number<N>(key, get(key));
  }

  template <class N>
  std::vector<N> list(const std::string& key, std::vector<N> fallback) const {
    if (!has(key)) return fallback;
    std::vector<N> out;
    std::string_view s = values_.at(key);
    std::size_t pos = 0;
    while (pos <= s.size()) {
      auto end = s.find(',', pos);
      if (end == std::string_view::npos) end = s.size();
      auto item = trim(s.substr(pos, end - pos));
      if (!item.empty()) out.push_back(parse_number<N>(key, std::string(item)));
      pos = end + 1;
    }
    return out;
  }

  void merge(const KeyValues& other) {
    for (auto& [k, v] : other.values_) values_[k] = v;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string serialize() const {
    std::string out;
    for (auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  }

  template <class N>
  static N parse_number(const std::string& key, const std::string& s) {
    if constexpr (std::is_floating_point_v<N>) {
      std::istringstream in(s);
      in.imbue(std::locale::classic());
      double v;
      in >> v;
      if (!in || !in.eof()) fail("config key '" + key + "': '" + s + "' is not a number");
      return static_cast<N>(v);
    } else {
      N v{};
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) fail("config key '" + key + "': '" + s + "' is not an integer");
      return v;
    }
  }

  std::map<std::string, std::string> values_;
};

// Shortest round-trippable decimal form of a double.
inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace omni
