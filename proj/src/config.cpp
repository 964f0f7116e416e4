#include "rial/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "rial/error.hpp"
#include "rial/jsonl.hpp"

namespace rial {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

RunConfig::RunConfig(std::vector<KeySpec> schema) : schema_(std::move(schema)) {
  for (const KeySpec& k : schema_) {
    if (!k.default_value.empty()) values_[k.name] = k.default_value;
  }
}

const KeySpec& RunConfig::spec(const std::string& key) const {
  const auto it = std::find_if(schema_.begin(), schema_.end(), [&](const KeySpec& k) { return k.name == key; });
  if (it == schema_.end()) throw ConfigError("unknown configuration key '" + key + "'");
  return *it;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  spec(key);
  values_[key] = value;
}

void RunConfig::merge_file_text(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) { merge_file_text(jsonl::read_file(path), path.string()); }

void RunConfig::check_required() const {
  for (const KeySpec& k : schema_) {
    if (k.required && !has(k.name)) {
      throw ConfigError("missing required setting " + flag_name(k.name) + " (config key '" + k.name + "')");
    }
  }
}

bool RunConfig::has(const std::string& key) const {
  spec(key);
  const auto it = values_.find(key);
  return it != values_.end() && !it->second.empty();
}

const std::string& RunConfig::str(const std::string& key) const {
  spec(key);
  const auto it = values_.find(key);
  if (it == values_.end() || it->second.empty()) {
    throw ConfigError("missing required setting " + flag_name(key) + " (config key '" + key + "')");
  }
  return it->second;
}

double RunConfig::real(const std::string& key) const {
  const std::string& s = str(key);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError(flag_name(key) + ": expected a number, got '" + s + "'");
  return v;
}

long long RunConfig::integer(const std::string& key) const {
  const std::string& s = str(key);
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError(flag_name(key) + ": expected an integer, got '" + s + "'");
  return v;
}

std::uint64_t RunConfig::u64(const std::string& key) const {
  const std::string& s = str(key);
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ConfigError(flag_name(key) + ": expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

std::vector<double> RunConfig::real_list(const std::string& key) const {
  std::vector<double> out;
  for (const std::string& item : split_list(str(key))) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc{} || p != item.data() + item.size()) throw ConfigError(flag_name(key) + ": bad list entry '" + item + "'");
    out.push_back(v);
  }
  return out;
}

std::vector<int> RunConfig::int_list(const std::string& key) const {
  std::vector<int> out;
  for (const std::string& item : split_list(str(key))) {
    int v = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc{} || p != item.data() + item.size()) throw ConfigError(flag_name(key) + ": bad list entry '" + item + "'");
    out.push_back(v);
  }
  return out;
}

std::string RunConfig::resolved_text() const {
  std::ostringstream out;
  for (const KeySpec& k : schema_) {
    if (!k.affects_output) continue;
    const auto it = values_.find(k.name);
    out << k.name << " = " << (it == values_.end() ? "" : it->second) << '\n';
  }
  return out.str();
}

}  // namespace rial
