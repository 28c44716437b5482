#pragma once

// Reader for the small TOML subset used by experiment configs:
//
//   # comment
//   key = value
//   [section]
//   key = value
//
// Values are double-quoted strings, true/false, numbers (including inf), or
// single-line arrays of those. The result is a JSON object with one nested
// object per section.

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>

#include "json.hpp"

#include "dptab/error.hpp"

namespace dptab {

namespace detail {

class ConfigLineParser {
 public:
  ConfigLineParser(std::string_view text, std::size_t line) : s_(text), line_(line) {}

  nlohmann::json value() {
    skip_ws();
    if (eof()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') return string();
    if (c == '[') return array();
    return scalar();
  }

  void expect_end() {
    skip_ws();
    if (!eof() && s_[pos_] != '#') fail("unexpected text after value");
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + what);
  }

  bool eof() const { return pos_ >= s_.size(); }

  void skip_ws() {
    while (!eof() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  nlohmann::json string() {
    ++pos_;
    std::string out;
    while (!eof() && s_[pos_] != '"') {
      char c = s_[pos_++];
      if (c == '\\') {
        if (eof()) fail("unterminated escape");
        const char e = s_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      out.push_back(c);
    }
    if (eof()) fail("unterminated string");
    ++pos_;
    return out;
  }

  nlohmann::json array() {
    ++pos_;
    nlohmann::json out = nlohmann::json::array();
    skip_ws();
    if (!eof() && s_[pos_] == ']') {
      ++pos_;
      return out;
    }
    for (;;) {
      out.push_back(value());
      skip_ws();
      if (eof()) fail("unterminated array");
      if (s_[pos_] == ']') {
        ++pos_;
        return out;
      }
      if (s_[pos_] != ',') fail("expected ',' or ']' in array");
      ++pos_;
      skip_ws();
      if (!eof() && s_[pos_] == ']') {
        ++pos_;
        return out;
      }
    }
  }

  nlohmann::json scalar() {
    const std::size_t start = pos_;
    while (!eof() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != ' ' && s_[pos_] != '\t' && s_[pos_] != '#')
      ++pos_;
    std::string tok(s_.substr(start, pos_ - start));
    if (tok == "true") return true;
    if (tok == "false") return false;
    if (tok == "inf" || tok == "+inf") return std::numeric_limits<double>::infinity();
    std::erase(tok, '_');
    const bool is_float = tok.find_first_of(".eE") != std::string::npos;
    const char* first = tok.data() + (tok.starts_with('+') ? 1 : 0);
    const char* last = tok.data() + tok.size();
    if (!is_float) {
      std::int64_t v = 0;
      auto [p, ec] = std::from_chars(first, last, v);
      if (ec == std::errc() && p == last && first != last) return v;
    } else {
      double v = 0.0;
      auto [p, ec] = std::from_chars(first, last, v);
      if (ec == std::errc() && p == last && std::isfinite(v)) return v;
    }
    fail("cannot parse value '" + std::string(s_.substr(start, pos_ - start)) + "'");
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  std::size_t line_;
};

inline bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

}  // namespace detail

inline nlohmann::json parse_config_text(std::string_view text) {
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* section = &root;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line(raw);
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r')) line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    if (line.front() == '[') {
      const auto close = line.find(']');
      if (close == std::string_view::npos) throw ConfigError("config line " + std::to_string(line_no) + ": unclosed section");
      const std::string name(line.substr(1, close - 1));
      if (!detail::valid_key(name)) throw ConfigError("config line " + std::to_string(line_no) + ": bad section name");
      if (root.contains(name)) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate section [" + name + "]");
      root[name] = nlohmann::json::object();
      section = &root[name];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    std::string_view key = line.substr(0, eq);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.remove_suffix(1);
    if (!detail::valid_key(key)) throw ConfigError("config line " + std::to_string(line_no) + ": bad key '" + std::string(key) + "'");
    if (section->contains(key)) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) + "'");
    detail::ConfigLineParser p(line.substr(eq + 1), line_no);
    (*section)[std::string(key)] = p.value();
    p.expect_end();
  }
  return root;
}

inline nlohmann::json parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace dptab
