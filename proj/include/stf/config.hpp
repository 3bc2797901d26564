#pragma once

// key = value text with '#' comments.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stf/errors.hpp"

namespace stf {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& is, const std::string& source = "config") {
    KeyValueConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig parse_text(const std::string& text, const std::string& source = "config") {
    std::istringstream is(text);
    return parse(is, source);
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    return parse(is, path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  const std::map<std::string, std::string>& values() const { return values_; }

  // Every key must be one of `known`.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, std::string> values_;
};

namespace parse {

inline std::size_t to_size(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size() || s.front() == '-') throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + s + "'");
  }
}

inline double to_double(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + s + "'");
  }
}

inline bool to_bool(const std::string& s, const std::string& key) {
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw ConfigError("'" + key + "' expects on/off, got '" + s + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = KeyValueConfig::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::vector<std::size_t> to_size_list(const std::string& s, const std::string& key) {
  std::vector<std::size_t> out;
  for (const auto& item : split(s)) out.push_back(to_size(item, key));
  return out;
}

inline std::vector<double> to_double_list(const std::string& s, const std::string& key) {
  std::vector<double> out;
  for (const auto& item : split(s)) out.push_back(to_double(item, key));
  return out;
}

template <typename Seq>
std::string join(const Seq& seq, const char* sep = ",") {
  std::ostringstream os;
  bool first = true;
  for (const auto& v : seq) {
    os << (first ? "" : sep) << v;
    first = false;
  }
  return os.str();
}

}  // namespace parse

}  // namespace stf
