#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace nf {

/// Plain-text settings: one `key=value` per line, `#` starts a comment line,
/// whitespace around keys and values is ignored.
struct KeyValueConfig {
  std::map<std::string, std::string> values;

  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::filesystem::path& path);
  /// Sorted by key, one `key=value` per line.
  std::string format() const;
  void save(const std::filesystem::path& path) const;

  bool has(const std::string& key) const { return values.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  /// Throws std::invalid_argument naming the key when it is missing.
  const std::string& require(const std::string& key) const;
  void set(const std::string& key, const std::string& value);
};

/// Parses "true"/"false"/"1"/"0"/"yes"/"no"/"on"/"off".
bool parse_bool(const std::string& text);

}  // namespace nf
