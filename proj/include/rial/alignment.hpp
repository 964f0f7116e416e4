#pragma once

// DPO and Rao-Kupper-weighted DPO on the linear softmax policy, and the
// iterative loop that alternates on-policy data construction with training
// against the previous iterate as reference.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rial/data_engine.hpp"
#include "rial/policy.hpp"
#include "rial/preference.hpp"

namespace rial {

struct DpoTerms {
  double loss = 0.0;
  double margin = 0.0;
  double weight = 1.0;
};

/// A pair with its features and reference log-probabilities cached; the
/// reference is frozen for a whole training stage so these never change.
struct PreparedPair {
  const PreferencePair* pair = nullptr;
  Mat chosen_features;
  Mat rejected_features;
  double reference_chosen = 0.0;
  double reference_rejected = 0.0;
};

PreparedPair prepare_pair(const PreferencePair& pair, const Policy& reference);
std::vector<PreparedPair> prepare_pairs(std::span<const PreferencePair> pairs, const Policy& reference,
                                        int workers = 1);

/// margin = r(x, y_w) - r(x, y_l); loss = -log sigmoid(margin).
DpoTerms dpo_loss(const PreferencePair& pair, const Policy& policy, const Policy& reference, double beta);
DpoTerms dpo_loss(const PreparedPair& pair, const Policy& policy, double beta);

/// loss = sg(weight) * (-log sigmoid(margin)), weight = p_tie(margin) + 2 / (nu + 1).
DpoTerms weighted_dpo_loss(const PreferencePair& pair, const Policy& policy, const Policy& reference, double beta,
                           const RaoKupper<double>& rk);
DpoTerms weighted_dpo_loss(const PreparedPair& pair, const Policy& policy, double beta, const RaoKupper<double>& rk);

/// Gradient of sum_t log pi(tokens[t] | ...) with respect to W.
Mat log_prob_gradient(const Policy& policy, const Mat& features, std::span<const TokenId> tokens);

/// Objective = mean_i [ w_i * (-log sigmoid(m_i)) + nll_weight * (-log pi(y_w,i)) ].
/// Weights are constants: taken from `frozen_weights` when supplied, otherwise
/// computed from the current margins (weights of 1 when `rk` is absent).
struct BatchGradient {
  Mat gradient;
  std::vector<DpoTerms> terms;  // per pair, evaluated before any update
  double objective = 0.0;
};

struct GradientOptions {
  double beta = 0.1;
  const RaoKupper<double>* rk = nullptr;  // nullptr: plain DPO
  double nll_weight = 0.0;
  std::span<const double> frozen_weights{};
  int workers = 1;
};

BatchGradient batch_gradient(std::span<const PreparedPair> batch, const Policy& policy, const GradientOptions& options);

/// Mean over the batch of weight * grad(-log sigmoid(margin)).
Mat weighted_dpo_gradient(std::span<const PreferencePair> batch, const Policy& policy, const Policy& reference,
                          double beta, const RaoKupper<double>& rk);

/// One gradient-descent step on DPO + nll_weight * NLL(chosen).
Policy nll_regularized_step(std::span<const PreferencePair> batch, const Policy& policy, const Policy& reference,
                            double beta, double learning_rate, double nll_weight);

// ---------------------------------------------------------------------------
// Training configuration

enum class PairSource { OnPolicy, OffPolicy };
enum class LossKind { Dpo, Weighted };
enum class WeightMode { PerStep, PerEpoch };
enum class OptimizerKind { Sgd, Adam };

std::string to_string(PairSource s);
std::string to_string(LossKind k);
std::string to_string(WeightMode m);
std::string to_string(OptimizerKind o);

/// Settings that may differ between iterations.
struct StageConfig {
  PairSource source = PairSource::OnPolicy;
  LossKind loss = LossKind::Weighted;
  double beta = 0.1;
  double nu = 3.0;
  double learning_rate = 0.5;
  int epochs = 5;
  int batch_size = 32;
  double nll_weight = 0.0;
};

struct TrainingConfig {
  StageConfig stage;
  std::vector<StageConfig> schedule;  // when non-empty, iteration t uses schedule[t - 1]
  int iterations = 1;
  int k = 5;
  double tau = kHallucinationThreshold;
  SamplingOptions sampling{};
  WeightMode weight_mode = WeightMode::PerStep;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  CategoryThresholds thresholds{};
  std::uint64_t seed = 0;
  int workers = 1;
  int offpolicy_retries = 3;

  const StageConfig& stage_for(int iteration) const;
  int total_iterations() const { return schedule.empty() ? iterations : static_cast<int>(schedule.size()); }
  void validate() const;
};

/// Two iterations: off-policy ground-truth pairs with beta 0.5 and NLL weight
/// 0.2 for one epoch, then Rao-Kupper-weighted on-policy pairs with beta 0.1,
/// nu 3, K 5 for five epochs. Learning rates and batch sizes come from `base`.
TrainingConfig paper_recipe(const TrainingConfig& base);

// ---------------------------------------------------------------------------
// Report

struct EpochRow {
  int iteration = 0;
  int epoch = 0;
  double mean_loss = 0.0;
  double mean_margin = 0.0;
  double mean_weight = 0.0;
  int n_easy = 0;
  int n_hard = 0;
  int n_boundary = 0;
  int pairs = 0;
  std::vector<int> weight_histogram;  // kWeightBins equal bins over [0, 1]
};

inline constexpr int kWeightBins = 10;

enum class IterationStatus { Ok, EmptyPreferenceSet };

struct IterationRow {
  int iteration = 0;
  StageConfig stage;
  IterationStatus status = IterationStatus::Ok;
  FilterStats filter;
  double halluc_rate_before = 0.0;
  double halluc_rate_after = 0.0;
};

struct TrainingReport {
  std::vector<EpochRow> epochs;
  std::vector<IterationRow> iterations;
  double initial_halluc_rate = 0.0;

  bool any_empty() const;
};

/// Fixed column order: iteration,epoch,mean_loss,mean_margin,mean_weight,n_easy,n_hard,n_boundary,pairs
std::string epochs_csv(const TrainingReport& report);
/// iteration,source,loss,beta,nu,learning_rate,epochs,batch_size,nll_weight,status,admitted,
/// filtered_all_clean,filtered_all_halluc,skipped,halluc_rate_before,halluc_rate_after
std::string iterations_csv(const TrainingReport& report);
/// iteration,epoch,bin_lo,bin_hi,count
std::string weight_histogram_csv(const TrainingReport& report);

// ---------------------------------------------------------------------------
// Training

/// Stage 2 of one iteration: `epochs` passes of shuffled mini-batches over a
/// fixed pair set with `reference` frozen. Appends one row per epoch.
Policy train_on_pairs(const Policy& initial, const Policy& reference, std::span<const PreferencePair> pairs,
                      const StageConfig& stage, const TrainingConfig& config, int iteration,
                      std::vector<EpochRow>* rows);

struct AlignmentResult {
  Policy policy;
  TrainingReport report;
  std::vector<Policy> iterates;  // policy after each iteration
};

/// Iterative alignment. Each iteration builds pairs from the current policy
/// (or ground truth, for off-policy stages), then trains with the iteration's
/// starting policy as the frozen reference. `eval_prompts` defaults to the
/// training prompts.
AlignmentResult run_iterative_alignment(const TrainingConfig& config, const std::vector<PromptRecord>& prompts,
                                        const HallucinationJudge& judge, const Policy& initial,
                                        const std::vector<PromptRecord>* eval_prompts = nullptr);

}  // namespace rial
