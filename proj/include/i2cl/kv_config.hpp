#pragma once

// Flat `key = value` text files. Blank lines and lines starting with '#' are
// ignored. Values are trimmed; a value wrapped in double quotes keeps its
// whitespace and understands \n, \t, \" and \\ escapes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace i2cl {

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string to_string() const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  /// Comma-separated list; empty items are dropped.
  std::vector<std::string> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

  static std::string quote(const std::string& raw);
  static std::vector<std::string> split_list(const std::string& value);

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace i2cl
