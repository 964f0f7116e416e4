#pragma once

// Token-level training dynamics of a softmax read-out: probability-space
// Euler integration of the cross-entropy gradient flow, the exact weight-space
// SGD route, and the on-policy vs off-policy preference-training contrast.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rial/data_engine.hpp"
#include "rial/error.hpp"
#include "rial/policy.hpp"

namespace rial {

/// p'_k = p_k - step * p_k * [(p_k - delta_ky) - sum_j p_j (p_j - delta_jy)].
/// No renormalization. Throws NumericalError when an entry leaves (0, 1).
template <typename Scalar>
Vector<Scalar> euler_step(const Vector<Scalar>& p, int target, Scalar step) {
  if (!(step > Scalar(0))) throw ConfigError("Euler step must be > 0");
  if (target < 0 || target >= p.size()) throw ConfigError("target outside vocabulary");
  Vector<Scalar> residual = p;
  residual[target] -= Scalar(1);
  const Scalar f = p.dot(residual);  // ||p||^2 - p_y
  Vector<Scalar> next = p - step * (p.array() * (residual.array() - f)).matrix();
  for (Eigen::Index k = 0; k < next.size(); ++k) {
    if (!(next[k] > Scalar(0) && next[k] < Scalar(1))) {
      throw NumericalError("Euler step left the open simplex at token " + std::to_string(k));
    }
  }
  return next;
}

/// Cross-entropy SGD on W (delegates to cross_entropy_step); eta == 0 is the identity.
Policy weight_space_step(const Policy& policy, const Context& context, TokenId target, double learning_rate);

/// Policy with a single relevant context (prompt 0, empty prefix) whose
/// next-token distribution equals `probs`. W = phi * log(p)^T / ||phi||^2.
Policy policy_with_distribution(const Vec& probs, std::uint64_t feature_seed, int dim = 16);

enum class DynamicsMode { EulerProbability, WeightSpace };

struct DynamicsConfig {
  int vocab = 0;
  std::vector<TokenId> halluc_set;  // sorted
  Vec initial;                      // explicit initial distribution
  double step = 0.05;               // dt * beta, with beta = eta ||phi||^2
  int steps = 200;
  DynamicsMode mode = DynamicsMode::EulerProbability;
  std::vector<TokenId> tracked;     // empty: every corrective except the target
};

/// Random Dirichlet(1) start; H = {argmax} plus round(V/4) - 1 further random
/// tokens; target drawn uniformly from the remaining tokens.
struct RandomTrajectorySetup {
  DynamicsConfig config;
  TokenId target = 0;
};
RandomTrajectorySetup random_offpolicy_setup(std::uint64_t seed, int vocab, int steps = 200, double step = 0.05);

struct TrajectoryRecord {
  int step = 0;
  TokenDistribution dist;
  TokenId hallucinated = 0;   // h: initial modal token, in H
  TokenId target = 0;         // y: training target, not in H
  std::vector<TokenId> tracked;
  std::vector<double> gaps;   // p_h - p_c per tracked c
};

struct TrajectoryRun {
  std::vector<TrajectoryRecord> records;  // steps + 1 records, record 0 is the start
  // d_c(n+1) < d_c(n) - 1e-12
  long gap_increase_violations = 0;
  // d_c(n+1) > d_c(n) + 1e-12 (the corrected direction)
  long gap_decrease_violations = 0;
  // p_h < ||p||^2 - p_y - 1e-12
  long g_bound_violations = 0;
  // p_h < p_c - 1e-12
  long ordering_violations = 0;
  long checks = 0;
  double max_sum_drift = 0.0;
};

inline constexpr double kGapTolerance = 1e-12;

/// Repeated updates toward a fixed target outside H.
TrajectoryRun run_offpolicy_trajectory(const DynamicsConfig& config, TokenId target);

struct RemarkSuiteSummary {
  int runs = 0;
  long checks = 0;
  long gap_increase_violations = 0;
  long gap_decrease_violations = 0;
  long g_bound_violations = 0;
  long ordering_violations = 0;
  double max_sum_drift = 0.0;
};

/// seed i uses vocab sizes[i % size].
RemarkSuiteSummary run_remark_suite(std::uint64_t base_seed, int n_seeds, const std::vector<int>& vocab_sizes,
                                    int steps, double step, DynamicsMode mode = DynamicsMode::EulerProbability);

// ---------------------------------------------------------------------------
// Preference-training contrast on a single context

struct ContrastConfig {
  std::vector<TokenId> halluc_set;
  double beta = 0.1;
  double learning_rate = 0.1;
  int steps = 500;
  int retry_budget = 64;
  std::uint64_t seed = 0;
  TokenId offpolicy_target = -1;  // ground-truth token for the off-policy arm
};

struct ContrastResult {
  TokenDistribution before;
  TokenDistribution after;
  std::vector<Vec> trajectory;  // distribution after each step, trajectory[0] = before
  bool flipped = false;         // on-policy: modal token is correct; off-policy: a tracked corrective overtook h
  int flip_step = -1;
  bool sampling_exhausted = false;
  int steps_run = 0;
};

/// Single-token DPO against the initial policy as reference, with chosen and
/// rejected tokens sampled from the current policy and labelled by `judge`.
ContrastResult run_onpolicy_contrast(const ContrastConfig& config, const Policy& policy,
                                     const HallucinationJudge& judge, int steps);

/// Same optimizer, but with pairs that come from outside the model: chosen is
/// the fixed ground-truth token, rejected the hallucinated token the model
/// itself is least likely to produce. Flip means some corrective other than
/// the target overtook the initial modal token.
ContrastResult run_offpolicy_contrast(const ContrastConfig& config, const Policy& policy, int steps);

// ---------------------------------------------------------------------------
// Support suppression

struct SupportProbeConfig {
  double beta = 0.1;
  double learning_rate = 0.5;
  int steps = 200;
  double ceiling = 1e-3;
};

struct SupportProbeEntry {
  double reference_prob = 0.0;
  double final_prob = 0.0;
  bool unreachable = false;  // chosen uses a token outside the vocabulary
};

struct SupportProbeResult {
  std::vector<SupportProbeEntry> entries;  // one per input pair
  bool all_below_ceiling = true;           // reachable entries only
};

/// Trains each pair on its own with `steps` DPO steps starting from the
/// reference; reports pi(y_w | x) before and after.
SupportProbeResult support_suppression_probe(const Policy& reference, const std::vector<PreferencePair>& pairs,
                                             const SupportProbeConfig& config);

/// Chosen = least-likely token at every step (length `len`), rejected = greedy response.
PreferencePair low_support_pair(const Policy& reference, PromptId prompt, int len);

/// Chosen = the given tokens, rejected = greedy response of the same length.
PreferencePair support_pair(const Policy& reference, PromptId prompt, std::vector<TokenId> chosen);

// ---------------------------------------------------------------------------

std::string trajectory_csv(const TrajectoryRun& run);
std::string distribution_trajectory_csv(const std::vector<Vec>& trajectory);

}  // namespace rial
