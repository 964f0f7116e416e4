#pragma once

// Synthetic prompts, on-policy rollouts, hallucination judges and the
// chosen/rejected selection rule that turns K judged rollouts into at most one
// preference pair.

#include <cstdint>
#include <optional>
#include <variant>
#include <vector>

#include "rial/policy.hpp"

namespace rial {

/// A prompt with its reference answer and the tokens that count as
/// hallucinations for it. Every other token is considered correct.
struct PromptRecord {
  PromptId id = 0;
  std::vector<TokenId> ground_truth;
  std::vector<TokenId> halluc_set;  // sorted, unique

  bool is_hallucination(TokenId t) const;
  bool contains_hallucination(std::span<const TokenId> tokens) const;
};

struct TaskOptions {
  int max_len = 6;  // ground truth length including the end token
};

/// Deterministic per seed. |H_x| = round(halluc_fraction * V); the end token
/// (V - 1) is never in H_x. Ground truths end with the end token.
std::vector<PromptRecord> generate_task(std::uint64_t seed, int n_prompts, int vocab, double halluc_fraction,
                                        const TaskOptions& options = {});

// ---------------------------------------------------------------------------
// Judges

/// Ground-truth containment check with optional label noise. Flips are a
/// deterministic function of (seed, prompt, response tokens).
struct OracleJudge {
  double noise = 0.0;       // flip probability, in [0, 0.5)
  double soft_delta = 0.0;  // scores are delta / 1 - delta instead of 0 / 1
  std::uint64_t seed = 0;
};

/// Feature recipe for the learned judge: bag-of-tokens of the response,
/// overlap with the ground-truth answer, and per-prompt content evidence (a
/// noisy per-token detector score standing in for the image).
struct ClassifierFeatures {
  int vocab = 0;
  double evidence_noise = 0.5;
  std::uint64_t seed = 0;

  int size() const { return vocab + 7; }
  double evidence(const PromptRecord& prompt, TokenId token) const;
  Vec extract(const PromptRecord& prompt, std::span<const TokenId> tokens) const;
};

struct LearnedClassifier {
  ClassifierFeatures recipe;
  Vec weights;
  double bias = 0.0;
  double validation_accuracy = 0.0;

  double probability(const PromptRecord& prompt, std::span<const TokenId> tokens) const;
};

using HallucinationJudge = std::variant<OracleJudge, LearnedClassifier>;

/// P(h = 1 | x, y) in [0, 1].
double judge(const HallucinationJudge& judge, const PromptRecord& prompt, std::span<const TokenId> tokens);

// ---------------------------------------------------------------------------
// Classifier training

struct LabeledExample {
  Vec features;
  int label = 0;
};

struct ClassifierTrainSet {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> validation;
};

struct ClassifierCorpusOptions {
  int n_examples = 2000;
  double validation_fraction = 0.2;
  int max_len = 6;
  OracleJudge labeler{};
};

/// Oracle-labelled responses: half are ground truths with random token
/// substitutions, half are uniform random token strings.
ClassifierTrainSet make_classifier_corpus(const std::vector<PromptRecord>& prompts, const ClassifierFeatures& recipe,
                                          const ClassifierCorpusOptions& options, std::uint64_t seed);

/// Mean binary cross-entropy and its gradient (weights then bias as the last entry).
double logistic_loss(const Vec& weights, double bias, const std::vector<LabeledExample>& data, Vec* gradient = nullptr);

double classifier_accuracy(const Vec& weights, double bias, const std::vector<LabeledExample>& data);

struct ClassifierTrainResult {
  LearnedClassifier classifier;
  std::vector<double> loss_per_epoch;  // loss before epoch 1, then after each epoch
};

/// Full-batch gradient descent from weights 0 and the prior log-odds bias.
ClassifierTrainResult train_classifier(const ClassifierTrainSet& train_set, const ClassifierFeatures& recipe,
                                       double learning_rate, int epochs);

// ---------------------------------------------------------------------------
// Selection

struct PreferencePair {
  PromptId prompt = 0;
  Response chosen;
  Response rejected;
  double p_halluc_chosen = 0.0;
  double p_halluc_rejected = 1.0;
};

struct RolloutSet {
  PromptId prompt = 0;
  std::vector<Response> responses;
  std::vector<double> p_halluc;
};

enum class FilterReason { AllClean, AllHallucinated };

struct Filtered {
  FilterReason reason;
};

using Selection = std::variant<PreferencePair, Filtered>;

inline constexpr double kHallucinationThreshold = 0.5;

/// chosen = lowest-score response below tau, rejected = highest-score response
/// at or above tau; earliest index wins ties. Filtered when all responses fall
/// on one side of tau.
Selection select_pair(const RolloutSet& rollout, double tau = kHallucinationThreshold);

struct FilterStats {
  int admitted = 0;
  int filtered_all_clean = 0;
  int filtered_all_halluc = 0;
  int skipped = 0;  // off-policy construction: no hallucinated sample found
};

struct PreferenceDataset {
  std::vector<PreferencePair> pairs;
  FilterStats stats;
  std::vector<RolloutSet> rollouts;  // per prompt, in input order
};

struct RolloutOptions {
  int k = 5;
  SamplingOptions sampling{};
  double tau = kHallucinationThreshold;
  int workers = 1;
  int offpolicy_retries = 3;
};

/// K samples for one prompt. Stream derived from (seed, prompt id).
std::vector<Response> rollout_prompt(const Policy& policy, PromptId prompt, int k, const SamplingOptions& sampling,
                                     std::uint64_t seed);

/// On-policy construction: K rollouts, judge, select_pair per prompt.
PreferenceDataset build_preference_dataset(const std::vector<PromptRecord>& prompts, const Policy& policy,
                                           const HallucinationJudge& judge, const RolloutOptions& options,
                                           std::uint64_t seed);

/// Off-policy construction: chosen is the ground-truth answer, rejected the
/// highest-scoring hallucinated rollout; up to `offpolicy_retries` extra
/// rounds of K samples before the prompt is skipped.
PreferenceDataset build_offpolicy_dataset(const std::vector<PromptRecord>& prompts, const Policy& policy,
                                          const HallucinationJudge& judge, const RolloutOptions& options,
                                          std::uint64_t seed);

/// Fraction of prompts whose greedy response contains a hallucination token.
double greedy_hallucination_rate(const Policy& policy, const std::vector<PromptRecord>& prompts, int max_len,
                                 int workers = 1);

}  // namespace rial
