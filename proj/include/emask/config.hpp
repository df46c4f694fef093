#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace emask {

// Flat "key.path = value" text configuration.
//
// Grammar: one assignment per line; '#' starts a comment; blank lines are
// ignored; keys match [A-Za-z0-9_.]+; values run to end of line with
// surrounding whitespace trimmed. Repeating a key is an error.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::string& origin = "<string>");
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int64_t> get_int_list(const std::string& key, const std::vector<int64_t>& fallback) const;
  std::vector<std::string> get_string_list(const std::string& key,
                                           const std::vector<std::string>& fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  // Canonical text: sorted "key = value" lines.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace emask
