#pragma once

// Flat "dotted.key = value" configuration files. '#' starts a comment.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "affectnet/error.hpp"

namespace affectnet {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::istream& in, const std::string& source = "<config>") {
    KeyValues kv;
    kv.source_ = source;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ParseError(source, lineno, "expected 'key = value'");
      std::string key = detail::trim(std::string_view(t).substr(0, eq));
      std::string value = detail::trim(std::string_view(t).substr(eq + 1));
      if (key.empty()) throw ParseError(source, lineno, "empty key");
      if (kv.values_.count(key)) throw ParseError(source, lineno, "duplicate key '" + key + "'");
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  static KeyValues from_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    return get_number<double>(key, fallback);
  }
  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    return get_number<std::size_t>(key, fallback);
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    return get_number<std::uint64_t>(key, fallback);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const std::string v = get_string(key, fallback ? "true" : "false");
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError(source_ + ": key '" + key + "' expects true/false, got '" + v + "'");
  }

  template <class N>
  std::vector<N> get_list(const std::string& key, const std::vector<N>& fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<N> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_number<N>(key, detail::trim(item)));
    return out;
  }

  // Keys present in the file that no getter asked for.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  void reject_unused() const {
    const auto unused = unused_keys();
    if (!unused.empty()) throw ValidationError(source_ + ": unknown key '" + unused.front() + "'");
  }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  template <class N>
  N get_number(const std::string& key, N fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : to_number<N>(key, it->second);
  }

  template <class N>
  N to_number(const std::string& key, const std::string& text) const {
    N value{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) {
      throw ValidationError(source_ + ": key '" + key + "' has invalid numeric value '" + text + "'");
    }
    return value;
  }

  std::string source_ = "<config>";
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace affectnet
