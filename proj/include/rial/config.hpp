#pragma once

// Flat `key = value` run configuration. Each command declares the keys it
// accepts; values resolve as defaults < config file < command-line flags.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rial {

struct KeySpec {
  std::string name;  // snake_case; the flag is --kebab-case
  std::string default_value;
  std::string help;
  bool required = false;
  bool affects_output = true;  // false: omitted from the resolved config file
};

std::string flag_name(const std::string& key);

class RunConfig {
 public:
  RunConfig() = default;
  explicit RunConfig(std::vector<KeySpec> schema);

  /// Parses `key = value` lines; `#` starts a comment. Unknown keys throw
  /// ConfigError naming the key.
  void merge_file_text(const std::string& text, const std::string& source = "config");
  void merge_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);

  /// Throws ConfigError naming the first required key that has no value.
  void check_required() const;

  bool has(const std::string& key) const;
  const std::string& str(const std::string& key) const;
  double real(const std::string& key) const;
  long long integer(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  std::vector<double> real_list(const std::string& key) const;
  std::vector<int> int_list(const std::string& key) const;

  /// Resolved document, keys in schema order.
  std::string resolved_text() const;

  const std::vector<KeySpec>& schema() const { return schema_; }

 private:
  const KeySpec& spec(const std::string& key) const;

  std::vector<KeySpec> schema_;
  std::map<std::string, std::string> values_;
};

}  // namespace rial
