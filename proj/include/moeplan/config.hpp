// Key-value tree configuration files. One line per key:
//
//   section.key  value [value ...]   # trailing comment
//
// Values are whitespace-separated scalars; list-valued keys take several.
// Loaders declare the keys they understand per section; anything else in a
// claimed section is rejected so typos surface as parse errors.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace moeplan {

class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

class Config {
 public:
  void parse_stream(std::istream& in, const std::string& origin) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::stringstream ss(line);
      std::string key;
      if (!(ss >> key)) continue;
      std::vector<std::string> values;
      std::string tok;
      while (ss >> tok) values.push_back(tok);
      if (values.empty()) {
        throw ParseError(origin + ":" + std::to_string(lineno) + ": key '" + key +
                         "' has no value");
      }
      if (entries_.count(key)) {
        throw ParseError(origin + ":" + std::to_string(lineno) + ": duplicate key '" +
                         key + "'");
      }
      entries_[key] = std::move(values);
    }
  }

  void parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file: " + path);
    parse_stream(in, path);
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  const std::vector<std::string>& raw(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ParseError("missing config key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    const auto& v = raw(key);
    if (v.size() != 1) throw ParseError("key '" + key + "' expects a single value");
    return to_double(key, v[0]);
  }

  double get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  long long get_int(const std::string& key) const {
    const auto& v = raw(key);
    if (v.size() != 1) throw ParseError("key '" + key + "' expects a single value");
    return to_int(key, v[0]);
  }

  long long get_int(const std::string& key, long long fallback) const {
    return has(key) ? get_int(key) : fallback;
  }

  std::vector<double> get_double_list(const std::string& key) const {
    const auto& v = raw(key);
    std::vector<double> out;
    out.reserve(v.size());
    for (const auto& s : v) out.push_back(to_double(key, s));
    return out;
  }

  std::vector<long long> get_int_list(const std::string& key) const {
    const auto& v = raw(key);
    std::vector<long long> out;
    out.reserve(v.size());
    for (const auto& s : v) out.push_back(to_int(key, s));
    return out;
  }

  // Every key under `section.` must be in `allowed`.
  void require_known_keys(const std::string& section,
                          const std::set<std::string>& allowed) const {
    std::string prefix = section + ".";
    for (const auto& [key, _] : entries_) {
      if (key.rfind(prefix, 0) != 0) continue;
      if (!allowed.count(key.substr(prefix.size()))) {
        throw ParseError("unknown config key '" + key + "'");
      }
    }
  }

  const std::map<std::string, std::vector<std::string>>& entries() const {
    return entries_;
  }

 private:
  static double to_double(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      throw ParseError("key '" + key + "': bad number '" + s + "'");
    }
    if (pos != s.size()) throw ParseError("key '" + key + "': bad number '" + s + "'");
    return v;
  }

  static long long to_int(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &pos);
    } catch (const std::exception&) {
      throw ParseError("key '" + key + "': bad integer '" + s + "'");
    }
    if (pos != s.size()) throw ParseError("key '" + key + "': bad integer '" + s + "'");
    return v;
  }

  std::map<std::string, std::vector<std::string>> entries_;
};

// FNV-1a over raw file bytes in load order; embedded in every output so a
// result can be traced back to the exact configuration that produced it.
inline std::uint64_t hash_files(const std::vector<std::string>& paths) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open config file: " + path);
    char c;
    while (in.get(c)) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    h ^= 0x1f;  // file boundary
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace moeplan
