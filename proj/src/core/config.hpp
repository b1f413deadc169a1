// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace kdf {

// Flat key/value run configuration. One namespace carries model, training,
// distillation and benchmark knobs; consumers pull the keys they own and
// validate them all at once. File format is one `key = value` per line,
// '#' comments, blank lines ignored. Rendering is canonical (known keys in
// schema order, unknown keys alphabetically) so rendered text is stable.
class Config {
public:
  Config() = default;

  static Config parse(const std::string& text);
  static Config load_file(const std::string& path);

  bool has(const std::string& key) const;
  void set(const std::string& key, const std::string& value);
  std::optional<std::string> get(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  uint64_t get_uint(const std::string& key, uint64_t fallback) const;
  std::vector<int64_t> get_int_list(const std::string& key,
                                    const std::vector<int64_t>& fallback) const;
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback) const;

  void set_int(const std::string& key, int64_t v);
  void set_double(const std::string& key, double v);
  void set_bool(const std::string& key, bool v);
  void set_int_list(const std::string& key, const std::vector<int64_t>& v);

  std::string render() const;

  // Keys present here that are not in the documented schema.
  std::vector<std::string> unknown_keys() const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

private:
  std::vector<std::pair<std::string, std::string>> entries_;  // insertion order
};

// Documented schema, in render order. Each entry: key, default-as-text, help.
struct ConfigKeyDoc {
  const char* key;
  const char* default_value;
  const char* help;
};
const std::vector<ConfigKeyDoc>& config_schema();

}  // namespace kdf
