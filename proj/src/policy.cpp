#include "rial/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "rial/error.hpp"
#include "rial/random.hpp"

namespace rial {

namespace {

constexpr double kPromptScale = 1.0;
constexpr double kTokenScale = 0.5;

void check_token(const Policy& policy, TokenId t) {
  if (t < 0 || t >= policy.vocab()) {
    throw ConfigError("token id " + std::to_string(t) + " outside vocabulary of size " +
                      std::to_string(policy.vocab()));
  }
}

}  // namespace

FeatureMap::FeatureMap(std::uint64_t seed, int dim, int vocab, int window)
    : seed_(seed), dim_(dim), vocab_(vocab), window_(window) {
  if (dim < 1) throw ConfigError("feature dimension must be >= 1");
  if (vocab < 2) throw ConfigError("vocabulary must hold at least two tokens");
  if (window < 0) throw ConfigError("feature window must be >= 0");
  const int symbols = vocab + 1;
  token_table_.resize(dim, static_cast<Eigen::Index>(window) * symbols);
  const double scale = kTokenScale / std::sqrt(static_cast<double>(dim));
  for (int col = 0; col < token_table_.cols(); ++col) {
    Rng rng(seed, "feature.token", static_cast<std::uint64_t>(col));
    for (int r = 0; r < dim; ++r) token_table_(r, col) = scale * rng.normal();
  }
}

Vec FeatureMap::prompt_embedding(PromptId prompt) const {
  Rng rng(seed_, "feature.prompt", static_cast<std::uint64_t>(prompt));
  const double scale = kPromptScale / std::sqrt(static_cast<double>(dim_));
  Vec v(dim_);
  for (int r = 0; r < dim_; ++r) v[r] = scale * rng.normal();
  return v;
}

Vec FeatureMap::features(PromptId prompt, std::span<const TokenId> prefix) const {
  Vec phi = prompt_embedding(prompt);
  const int symbols = vocab_ + 1;
  const auto n = static_cast<int>(prefix.size());
  // slot 0 is the most recent token
  for (int slot = 0; slot < window_; ++slot) {
    const int idx = n - 1 - slot;
    const int token = idx >= 0 ? prefix[idx] : vocab_;
    phi += token_table_.col(slot * symbols + token);
  }
  return phi;
}

Mat FeatureMap::response_features(PromptId prompt, std::span<const TokenId> tokens) const {
  const Vec base = prompt_embedding(prompt);
  const int symbols = vocab_ + 1;
  Mat out(dim_, static_cast<Eigen::Index>(tokens.size()));
  for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
    Vec phi = base;
    for (int slot = 0; slot < window_; ++slot) {
      const int idx = t - 1 - slot;
      const int token = idx >= 0 ? tokens[idx] : vocab_;
      phi += token_table_.col(slot * symbols + token);
    }
    out.col(t) = phi;
  }
  return out;
}

TokenId TokenDistribution::argmax() const {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < probs.size(); ++k) {
    if (probs[k] > probs[best]) best = k;
  }
  return static_cast<TokenId>(best);
}

Policy::Policy(FeatureMap features) : features_(std::move(features)) {
  weights_ = Mat::Zero(features_.dim(), features_.vocab());
}

Policy::Policy(FeatureMap features, Mat weights)
    : features_(std::move(features)), weights_(std::move(weights)) {
  if (weights_.rows() != features_.dim() || weights_.cols() != features_.vocab()) {
    throw ConfigError("weight matrix shape does not match feature map (d x V)");
  }
}

Policy Policy::random(FeatureMap features, double scale, std::uint64_t seed) {
  Policy p(std::move(features));
  Rng rng(seed, "policy.init");
  // column-major fill order is fixed by Eigen's storage
  for (Eigen::Index i = 0; i < p.weights_.size(); ++i) p.weights_.data()[i] = scale * rng.normal();
  return p;
}

void Policy::check_finite() const {
  if (!weights_.allFinite()) throw NumericalError("policy weights contain non-finite entries");
}

std::uint64_t Policy::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(weights_.data());
  const auto n = static_cast<std::size_t>(weights_.size()) * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

TokenDistribution next_token_distribution(const Policy& policy, const Vec& phi) {
  policy.check_finite();
  return {softmax(policy.logits(phi))};
}

TokenDistribution next_token_distribution(const Policy& policy, const Context& context) {
  for (TokenId t : context.prefix) check_token(policy, t);
  return next_token_distribution(policy, policy.feature_map().features(context.prompt, context.prefix));
}

double sequence_log_prob(const Policy& policy, const Mat& features, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ConfigError("response must contain at least one token");
  double total = 0.0;
  for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
    check_token(policy, tokens[t]);
    const Vec z = policy.logits(features.col(t));
    total += z[tokens[t]] - log_sum_exp(z);
  }
  return total;
}

double sequence_log_prob(const Policy& policy, PromptId prompt, std::span<const TokenId> tokens) {
  for (TokenId t : tokens) check_token(policy, t);
  policy.check_finite();
  return sequence_log_prob(policy, policy.feature_map().response_features(prompt, tokens), tokens);
}

Response sample_response(const Policy& policy, PromptId prompt, const SamplingOptions& options,
                         std::uint64_t rng_seed) {
  if (options.max_len < 1) throw ConfigError("max_len must be >= 1");
  if (!options.greedy && !(options.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  policy.check_finite();

  Rng rng(rng_seed);
  Response out;
  const FeatureMap& fmap = policy.feature_map();
  while (static_cast<int>(out.tokens.size()) < options.max_len) {
    const Vec z = policy.logits(fmap.features(prompt, out.tokens));
    const Vec logp = log_softmax(z);
    TokenId next = 0;
    if (options.greedy) {
      next = TokenDistribution{logp}.argmax();
    } else {
      const Vec p = softmax(Vec(z / options.temperature));
      const double u = rng.uniform();
      double acc = 0.0;
      next = static_cast<TokenId>(p.size() - 1);
      for (Eigen::Index k = 0; k < p.size(); ++k) {
        acc += p[k];
        if (u < acc) {
          next = static_cast<TokenId>(k);
          break;
        }
      }
    }
    out.tokens.push_back(next);
    out.log_prob += logp[next];
    if (next == policy.end_token()) break;
  }
  return out;
}

Policy cross_entropy_step(const Policy& policy, const Context& context, TokenId target,
                          double learning_rate) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  check_token(policy, target);
  for (TokenId t : context.prefix) check_token(policy, t);
  const Vec phi = policy.feature_map().features(context.prompt, context.prefix);
  Vec residual = next_token_distribution(policy, phi).probs;
  residual[target] -= 1.0;
  Policy next = policy;
  next.mutable_weights().noalias() -= learning_rate * phi * residual.transpose();
  return next;
}

}  // namespace rial
