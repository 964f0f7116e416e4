#pragma once

// Linearly parameterized softmax policy: logits z = W^T phi(context), where
// phi is a fixed seeded embedding of (prompt id, last w response tokens) and
// only the read-out matrix W is trained.

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rial/softmax.hpp"

namespace rial {

using Vec = Vector<double>;
using Mat = Matrix<double>;

using TokenId = int;
using PromptId = int;

/// Fixed feature extractor. phi(prompt, window) = prompt embedding plus one
/// positional token embedding per window slot; slots before the start of the
/// response hold a padding symbol. Embeddings are regenerated from the seed,
/// so two maps with equal parameters are interchangeable.
class FeatureMap {
 public:
  FeatureMap(std::uint64_t seed, int dim, int vocab, int window = 2);

  std::uint64_t seed() const { return seed_; }
  int dim() const { return dim_; }
  int vocab() const { return vocab_; }
  int window() const { return window_; }

  /// phi for the next token given everything generated so far. Only the last
  /// `window()` entries of `prefix` matter.
  Vec features(PromptId prompt, std::span<const TokenId> prefix) const;

  /// Column t is the feature vector used to predict tokens[t].
  Mat response_features(PromptId prompt, std::span<const TokenId> tokens) const;

  friend bool operator==(const FeatureMap& a, const FeatureMap& b) {
    return a.seed_ == b.seed_ && a.dim_ == b.dim_ && a.vocab_ == b.vocab_ && a.window_ == b.window_;
  }

 private:
  Vec prompt_embedding(PromptId prompt) const;

  std::uint64_t seed_;
  int dim_;
  int vocab_;
  int window_;
  // (window * (vocab + 1)) columns; column slot * (vocab + 1) + token, token == vocab is padding.
  Mat token_table_;
};

/// Probability vector over the vocabulary.
struct TokenDistribution {
  Vec probs;

  int size() const { return static_cast<int>(probs.size()); }
  double operator[](int k) const { return probs[k]; }
  TokenId argmax() const;  // lowest id wins ties
};

struct Response {
  std::vector<TokenId> tokens;
  double log_prob = 0.0;  // nats, under the temperature-1 policy

  friend bool operator==(const Response&, const Response&) = default;
};

struct Context {
  PromptId prompt = 0;
  std::vector<TokenId> prefix;
};

class Policy {
 public:
  /// Zero read-out weights: the uniform policy.
  explicit Policy(FeatureMap features);
  Policy(FeatureMap features, Mat weights);

  /// Entries iid N(0, scale^2).
  static Policy random(FeatureMap features, double scale, std::uint64_t seed);

  const FeatureMap& feature_map() const { return features_; }
  const Mat& weights() const { return weights_; }
  Mat& mutable_weights() { return weights_; }

  int vocab() const { return features_.vocab(); }
  int dim() const { return features_.dim(); }
  TokenId end_token() const { return features_.vocab() - 1; }

  Vec logits(const Vec& phi) const { return weights_.transpose() * phi; }

  /// Throws NumericalError if any weight is non-finite.
  void check_finite() const;

  /// FNV hash over the raw weight bytes; used to assert a policy was not mutated.
  std::uint64_t checksum() const;

 private:
  FeatureMap features_;
  Mat weights_;
};

TokenDistribution next_token_distribution(const Policy& policy, const Context& context);
TokenDistribution next_token_distribution(const Policy& policy, const Vec& phi);

/// Sum of per-step log-softmax values of `tokens` given the prompt.
double sequence_log_prob(const Policy& policy, PromptId prompt, std::span<const TokenId> tokens);

/// Same, reusing precomputed features (column t predicts tokens[t]).
double sequence_log_prob(const Policy& policy, const Mat& features, std::span<const TokenId> tokens);

struct SamplingOptions {
  double temperature = 1.0;
  int max_len = 6;
  bool greedy = false;  // the temperature -> 0 limit
};

/// Ancestral sampling; stops after max_len tokens or after emitting the end token.
Response sample_response(const Policy& policy, PromptId prompt, const SamplingOptions& options,
                         std::uint64_t rng_seed);

/// One SGD step on -log p(target | context): W' = W - eta * phi (p - e_target)^T.
Policy cross_entropy_step(const Policy& policy, const Context& context, TokenId target,
                          double learning_rate);

/// Checkpoint text format: header lines `key value`, then `weights` followed by
/// the d x V matrix in row-major order, one row per line, %.17g.
void save_checkpoint(const Policy& policy, const std::filesystem::path& path);
std::string checkpoint_text(const Policy& policy);
Policy load_checkpoint(const std::filesystem::path& path);
Policy parse_checkpoint(const std::string& text);

}  // namespace rial
