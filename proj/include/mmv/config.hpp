#pragma once
// Run configuration: a TOML subset or JSON, flattened to dotted keys. Readers
// mark the keys they consume so anything left over can be rejected by name.

#include "mmv/errors.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mmv {

namespace toml {

namespace detail {

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  nlohmann::json parse() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    std::set<std::string> headers;
    while (!eof()) {
      skip_blank_lines();
      if (eof()) break;
      if (peek() == '[') {
        ++pos_;
        if (!eof() && peek() == '[') fail("arrays of tables are not supported");
        skip_ws();
        const auto path = parse_key();
        skip_ws();
        expect(']');
        std::string joined;
        for (const auto& k : path) joined += (joined.empty() ? "" : ".") + k;
        if (!headers.insert(joined).second) fail("table [" + joined + "] defined twice");
        table = &root;
        for (const auto& k : path) {
          auto& next = (*table)[k];
          if (next.is_null()) next = nlohmann::json::object();
          if (!next.is_object()) fail("'" + k + "' is already a value, not a table");
          table = &next;
        }
        finish_line();
        continue;
      }
      const auto path = parse_key();
      skip_ws();
      expect('=');
      skip_ws();
      auto value = parse_value();
      nlohmann::json* at = table;
      for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        auto& next = (*at)[path[i]];
        if (next.is_null()) next = nlohmann::json::object();
        if (!next.is_object()) fail("'" + path[i] + "' is already a value, not a table");
        at = &next;
      }
      if (at->contains(path.back())) fail("duplicate key '" + path.back() + "'");
      (*at)[path.back()] = std::move(value);
      finish_line();
    }
    return root;
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  int line_ = 1;

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + what);
  }
  bool eof() const { return pos_ >= text_.size(); }
  char peek() const { return text_[pos_]; }
  void expect(char c) {
    if (eof() || peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  void skip_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }
  void skip_comment() {
    if (!eof() && peek() == '#')
      while (!eof() && peek() != '\n') ++pos_;
  }
  void newline() {
    if (!eof() && peek() == '\r') ++pos_;
    if (!eof() && peek() == '\n') {
      ++pos_;
      ++line_;
    }
  }
  void skip_blank_lines() {
    for (;;) {
      skip_ws();
      skip_comment();
      if (eof()) return;
      if (peek() == '\n' || peek() == '\r') {
        newline();
        continue;
      }
      return;
    }
  }
  // whitespace, comments and newlines inside arrays
  void skip_array_space() {
    for (;;) {
      skip_ws();
      skip_comment();
      if (!eof() && (peek() == '\n' || peek() == '\r')) {
        newline();
        continue;
      }
      return;
    }
  }
  void finish_line() {
    skip_ws();
    skip_comment();
    if (eof()) return;
    if (peek() != '\n' && peek() != '\r') fail("unexpected text after value");
    newline();
  }

  static bool bare(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
  }

  std::vector<std::string> parse_key() {
    std::vector<std::string> parts;
    for (;;) {
      skip_ws();
      if (!eof() && (peek() == '"' || peek() == '\'')) {
        parts.push_back(peek() == '"' ? basic_string() : literal_string());
      } else {
        const auto start = pos_;
        while (!eof() && bare(peek())) ++pos_;
        if (pos_ == start) fail("expected a key");
        parts.emplace_back(text_.substr(start, pos_ - start));
      }
      skip_ws();
      if (!eof() && peek() == '.') {
        ++pos_;
        continue;
      }
      return parts;
    }
  }

  std::string basic_string() {
    expect('"');
    std::string out;
    for (;;) {
      if (eof() || peek() == '\n') fail("unterminated string");
      const char c = text_[pos_++];
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (eof()) fail("unterminated escape");
      switch (text_[pos_++]) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        default: fail("unsupported escape sequence");
      }
    }
  }

  std::string literal_string() {
    expect('\'');
    const auto start = pos_;
    while (!eof() && peek() != '\'' && peek() != '\n') ++pos_;
    if (eof() || peek() != '\'') fail("unterminated string");
    std::string out(text_.substr(start, pos_ - start));
    ++pos_;
    return out;
  }

  nlohmann::json parse_value() {
    if (eof()) fail("missing value");
    const char c = peek();
    if (c == '"') return basic_string();
    if (c == '\'') return literal_string();
    if (c == '{') fail("inline tables are not supported; use a [table] header");
    if (c == '[') {
      ++pos_;
      nlohmann::json arr = nlohmann::json::array();
      for (;;) {
        skip_array_space();
        if (eof()) fail("unterminated array");
        if (peek() == ']') {
          ++pos_;
          return arr;
        }
        arr.push_back(parse_value());
        skip_array_space();
        if (!eof() && peek() == ',') {
          ++pos_;
          continue;
        }
        skip_array_space();
        expect(']');
        return arr;
      }
    }
    const auto start = pos_;
    while (!eof() && peek() != ',' && peek() != ']' && peek() != '#' && peek() != '\n' && peek() != '\r' &&
           peek() != ' ' && peek() != '\t')
      ++pos_;
    std::string tok(text_.substr(start, pos_ - start));
    if (tok == "true") return true;
    if (tok == "false") return false;
    if (tok.empty()) fail("missing value");
    std::string digits;
    for (char ch : tok)
      if (ch != '_') digits += ch;
    if (digits == "inf" || digits == "+inf") return std::numeric_limits<double>::infinity();
    if (digits == "-inf") return -std::numeric_limits<double>::infinity();
    if (digits == "nan" || digits == "+nan" || digits == "-nan") return std::numeric_limits<double>::quiet_NaN();
    const bool is_float = digits.find_first_of(".eE") != std::string::npos;
    try {
      std::size_t used = 0;
      if (is_float) {
        const double v = std::stod(digits, &used);
        if (used == digits.size()) return v;
      } else {
        const long long v = std::stoll(digits, &used, 10);
        if (used == digits.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("cannot parse value '" + tok + "'");
  }
};

}  // namespace detail

/// Tables, dotted keys, strings, integers, floats, booleans and (nested) arrays.
inline nlohmann::json parse(std::string_view text) { return detail::Parser(text).parse(); }

}  // namespace toml

/// Dotted-key view of a nested JSON object; arrays and scalars are leaves.
inline void flatten_json(const nlohmann::json& j, const std::string& prefix, std::map<std::string, nlohmann::json>& out) {
  if (j.is_object() && !j.empty()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten_json(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    return;
  }
  if (!prefix.empty()) out[prefix] = j;
}

class Config {
 public:
  Config() = default;

  /// `json_format` selects JSON over TOML.
  static Config from_text(std::string text, bool json_format) {
    Config c;
    c.text_ = std::move(text);
    nlohmann::json root;
    if (json_format) {
      try {
        root = nlohmann::json::parse(c.text_);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
      }
      if (!root.is_object()) throw ConfigError("config must be a JSON object");
    } else {
      root = toml::parse(c.text_);
    }
    flatten_json(root, "", c.values_);
    return c;
  }

  static Config from_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), p.extension() == ".json");
  }

  /// The file exactly as read.
  const std::string& text() const { return text_; }

  /// Effective values as a nested object (after overrides).
  nlohmann::json effective() const {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [k, v] : values_) out[nlohmann::json::json_pointer("/" + replace_dots(k))] = v;
    return out;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  bool has_prefix(const std::string& prefix) const {
    const auto it = values_.lower_bound(prefix + ".");
    return it != values_.end() && it->first.rfind(prefix + ".", 0) == 0;
  }

  void set(const std::string& key, nlohmann::json v) { values_[key] = std::move(v); }

  template <class T>
  std::optional<T> find(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    used_.insert(key);
    return convert<T>(key, it->second);
  }

  template <class T>
  T get(const std::string& key, T fallback) const {
    auto v = find<T>(key);
    return v ? *v : fallback;
  }

  template <class T>
  T require(const std::string& key) const {
    auto v = find<T>(key);
    if (!v) throw ConfigError("missing config key '" + key + "'");
    return *v;
  }

  /// Marks every key under `prefix` as consumed (for sections a command ignores).
  void ignore_section(const std::string& prefix) const {
    for (const auto& [k, _] : values_)
      if (k.rfind(prefix + ".", 0) == 0) used_.insert(k);
  }

  /// Throws naming the first key (in sorted order) no reader asked for.
  void reject_unknown() const {
    for (const auto& [k, _] : values_)
      if (!used_.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

 private:
  std::string text_;
  std::map<std::string, nlohmann::json> values_;
  mutable std::set<std::string> used_;

  static std::string replace_dots(std::string s) {
    for (auto& c : s)
      if (c == '.') c = '/';
    return s;
  }

  static const char* type_word(const nlohmann::json& v) {
    if (v.is_boolean()) return "boolean";
    if (v.is_number_integer()) return "integer";
    if (v.is_number()) return "float";
    if (v.is_string()) return "string";
    if (v.is_array()) return "array";
    return "table";
  }

  template <class T>
  static T convert(const std::string& key, const nlohmann::json& v) {
    auto bad = [&](const char* want) {
      return ConfigError("config key '" + key + "': expected " + want + ", got " + type_word(v));
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw bad("boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw bad("integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.get<long long>() < 0) throw ConfigError("config key '" + key + "': must be non-negative");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw bad("number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw bad("string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, nlohmann::json>) {
      return v;
    } else {
      // vectors of scalars
      if (!v.is_array()) throw bad("array");
      T out;
      for (const auto& e : v) out.push_back(convert<typename T::value_type>(key, e));
      return out;
    }
  }
};

}  // namespace mmv
