#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "rial/error.hpp"
#include "rial/policy.hpp"

namespace rial {

namespace {

constexpr int kSchemaVersion = 1;

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ConfigError("checkpoint: malformed number '" + s + "'");
  }
  return v;
}

}  // namespace

std::string checkpoint_text(const Policy& policy) {
  const FeatureMap& f = policy.feature_map();
  std::ostringstream out;
  out << "schema_version " << kSchemaVersion << '\n'
      << "vocab " << f.vocab() << '\n'
      << "dim " << f.dim() << '\n'
      << "window " << f.window() << '\n'
      << "seed " << f.seed() << '\n'
      << "weights\n";
  const Mat& w = policy.weights();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      if (c) out << ' ';
      out << format_double(w(r, c));
    }
    out << '\n';
  }
  return out.str();
}

void save_checkpoint(const Policy& policy, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  out << checkpoint_text(policy);
}

Policy parse_checkpoint(const std::string& text) {
  std::istringstream in(text);
  std::string key;
  long long version = -1, vocab = -1, dim = -1, window = -1;
  unsigned long long seed = 0;
  bool have_seed = false;
  while (in >> key) {
    if (key == "weights") break;
    if (key == "schema_version") in >> version;
    else if (key == "vocab") in >> vocab;
    else if (key == "dim") in >> dim;
    else if (key == "window") in >> window;
    else if (key == "seed") have_seed = static_cast<bool>(in >> seed);
    else throw ConfigError("checkpoint: unknown header key '" + key + "'");
    if (!in) throw ConfigError("checkpoint: bad value for '" + key + "'");
  }
  if (key != "weights") throw ConfigError("checkpoint: missing weights section");
  if (version != kSchemaVersion) throw ConfigError("checkpoint: unsupported schema_version");
  if (vocab < 2 || dim < 1 || window < 0 || !have_seed) {
    throw ConfigError("checkpoint: incomplete header");
  }
  FeatureMap fmap(seed, static_cast<int>(dim), static_cast<int>(vocab), static_cast<int>(window));
  Mat w(dim, vocab);
  std::string tok;
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      if (!(in >> tok)) throw ConfigError("checkpoint: truncated weights");
      w(r, c) = parse_double(tok);
    }
  }
  if (in >> tok) throw ConfigError("checkpoint: trailing data after weights");
  Policy policy(std::move(fmap), std::move(w));
  policy.check_finite();
  return policy;
}

Policy load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str());
}

}  // namespace rial
