// Copyright 2026 The mpe Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Flat `key = value` documents used for experiment configs, run manifests
// and the config record inside checkpoints.

#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mpe/common.hpp"

namespace mpe {

class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    std::istringstream is(text);
    std::string line;
    std::size_t row = 0;
    while (std::getline(is, line)) {
      ++row;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) fail_usage(origin, ":", row, ": expected key = value");
      const auto key = trim(trimmed.substr(0, eq));
      if (key.empty()) fail_usage(origin, ":", row, ": empty key");
      kv.set(key, trim(trimmed.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail_usage("cannot open config ", path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path);
  }

  /// Applies a `key=value` override.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) fail_usage("override '", assignment, "' is not key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  /// Rejects keys not in `known`.
  void check_known(const std::vector<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (std::find(known.begin(), known.end(), k) == known.end()) fail_usage("unknown config key '", k, "'");
  }

  void read(const std::string& key, std::string& out) const {
    if (auto it = values_.find(key); it != values_.end()) out = it->second;
  }
  void read(const std::string& key, bool& out) const {
    if (auto it = values_.find(key); it != values_.end()) {
      if (it->second == "true" || it->second == "1") out = true;
      else if (it->second == "false" || it->second == "0") out = false;
      else fail_usage("key '", key, "' expects true/false, got '", it->second, "'");
    }
  }
  void read(const std::string& key, double& out) const {
    if (auto it = values_.find(key); it != values_.end()) out = number(key, it->second);
  }
  void read(const std::string& key, std::size_t& out) const {
    if (auto it = values_.find(key); it != values_.end()) out = count(key, it->second);
  }
  void read(const std::string& key, std::vector<double>& out) const {
    if (auto it = values_.find(key); it != values_.end()) {
      out.clear();
      for (const auto& tok : split_list(it->second)) out.push_back(number(key, tok));
    }
  }
  void read(const std::string& key, std::vector<std::size_t>& out) const {
    if (auto it = values_.find(key); it != values_.end()) {
      out.clear();
      for (const auto& tok : split_list(it->second)) out.push_back(count(key, tok));
    }
  }

  static std::string format(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
  static std::string format(std::size_t v) { return std::to_string(v); }
  static std::string format(bool v) { return v ? "true" : "false"; }
  static std::string format(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : ",") + format(x);
    return s;
  }
  static std::string format(const std::vector<std::size_t>& v) {
    std::string s;
    for (auto x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
    return s;
  }

  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
      const auto comma = s.find(',', pos);
      auto tok = trim(s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
      if (!tok.empty()) out.push_back(tok);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  static double number(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0') fail_usage("key '", key, "' expects a number, got '", v, "'");
    return d;
  }
  static std::size_t count(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const auto d = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0' || v[0] == '-') fail_usage("key '", key, "' expects a count, got '", v, "'");
    return static_cast<std::size_t>(d);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace mpe
