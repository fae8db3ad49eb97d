#pragma once

// Line-oriented key-value configuration: `key = value` per line, `#` starts
// a comment, values may hold several whitespace-separated numbers
// (e.g. extrinsics). Paths in values resolve relative to the config file.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace brg {

class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::string& base_dir = ".") {
    Config c;
    c.base_dir_ = base_dir;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto eq = line.find('=');
      if (eq == std::string::npos) {
        if (line.find_first_not_of(" \t\r") != std::string::npos)
          throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
        continue;
      }
      std::string key = trim(line.substr(0, eq));
      std::string val = trim(line.substr(eq + 1));
      if (key.empty()) throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
      c.entries_[key] = val;
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(text, std::filesystem::path(path).parent_path().string());
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string get_string(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw std::runtime_error("config: missing key '" + key + "'");
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? dflt : it->second;
  }

  double get_double(const std::string& key) const { return to_double(key, get_string(key)); }
  double get_double(const std::string& key, double dflt) const {
    return has(key) ? get_double(key) : dflt;
  }

  int64_t get_int(const std::string& key) const {
    double d = get_double(key);
    auto i = static_cast<int64_t>(d);
    if (static_cast<double>(i) != d)
      throw std::runtime_error("config: key '" + key + "' is not an integer");
    return i;
  }
  int64_t get_int(const std::string& key, int64_t dflt) const {
    return has(key) ? get_int(key) : dflt;
  }

  std::vector<double> get_vector(const std::string& key) const {
    std::istringstream in(get_string(key));
    std::vector<double> v;
    double d;
    while (in >> d) v.push_back(d);
    return v;
  }

  // Resolves a path value relative to the config file location.
  std::string get_path(const std::string& key) const {
    std::filesystem::path p(get_string(key));
    if (p.is_absolute()) return p.string();
    return (std::filesystem::path(base_dir_) / p).string();
  }

  const std::string& base_dir() const { return base_dir_; }

 private:
  static std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  double to_double(const std::string& key, const std::string& v) const {
    try {
      size_t pos = 0;
      double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' has non-numeric value '" + v + "'");
    }
  }

  std::map<std::string, std::string> entries_;
  std::string base_dir_ = ".";
};

}  // namespace brg
