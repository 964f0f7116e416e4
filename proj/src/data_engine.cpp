#include "rial/data_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "rial/error.hpp"
#include "rial/parallel.hpp"
#include "rial/random.hpp"

namespace rial {

bool PromptRecord::is_hallucination(TokenId t) const {
  return std::binary_search(halluc_set.begin(), halluc_set.end(), t);
}

bool PromptRecord::contains_hallucination(std::span<const TokenId> tokens) const {
  return std::any_of(tokens.begin(), tokens.end(), [&](TokenId t) { return is_hallucination(t); });
}

std::vector<PromptRecord> generate_task(std::uint64_t seed, int n_prompts, int vocab, double halluc_fraction,
                                        const TaskOptions& options) {
  if (n_prompts < 1) throw ConfigError("n_prompts must be >= 1");
  if (vocab < 3) throw ConfigError("vocab must be >= 3 (content tokens plus the end token)");
  if (!(halluc_fraction > 0.0 && halluc_fraction < 1.0)) {
    throw ConfigError("halluc_fraction must lie in (0, 1)");
  }
  if (options.max_len < 2) throw ConfigError("max_len must be >= 2");
  const int content = vocab - 1;
  const int h_size = static_cast<int>(std::lround(halluc_fraction * vocab));
  if (h_size < 1 || h_size > content - 1) {
    throw ConfigError("halluc_fraction " + std::to_string(halluc_fraction) + " gives a hallucination set of size " +
                      std::to_string(h_size) + "; need 1.." + std::to_string(content - 1));
  }

  std::vector<PromptRecord> out;
  out.reserve(static_cast<std::size_t>(n_prompts));
  std::vector<TokenId> pool(static_cast<std::size_t>(content));
  for (int id = 0; id < n_prompts; ++id) {
    Rng rng(seed, "task.prompt", static_cast<std::uint64_t>(id));
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool.begin(), pool.end());
    PromptRecord rec;
    rec.id = id;
    rec.halluc_set.assign(pool.begin(), pool.begin() + h_size);
    std::sort(rec.halluc_set.begin(), rec.halluc_set.end());
    const std::vector<TokenId> correct(pool.begin() + h_size, pool.end());
    const int len = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(options.max_len - 1)));
    for (int t = 0; t < len; ++t) rec.ground_truth.push_back(correct[rng.below(correct.size())]);
    rec.ground_truth.push_back(vocab - 1);
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t response_key(PromptId prompt, std::span<const TokenId> tokens) {
  std::uint64_t h = splitmix64(static_cast<std::uint64_t>(prompt));
  for (TokenId t : tokens) h = splitmix64(h ^ static_cast<std::uint64_t>(t + 1));
  return h;
}

double oracle_score(const OracleJudge& oracle, const PromptRecord& prompt, std::span<const TokenId> tokens) {
  if (!(oracle.noise >= 0.0 && oracle.noise < 0.5)) throw ConfigError("oracle noise must lie in [0, 0.5)");
  bool label = prompt.contains_hallucination(tokens);
  if (oracle.noise > 0.0) {
    Rng rng(oracle.seed, "judge.noise", response_key(prompt.id, tokens));
    if (rng.bernoulli(oracle.noise)) label = !label;
  }
  return label ? 1.0 - oracle.soft_delta : oracle.soft_delta;
}

}  // namespace

double judge(const HallucinationJudge& j, const PromptRecord& prompt, std::span<const TokenId> tokens) {
  return std::visit(
      [&](const auto& impl) -> double {
        using T = std::decay_t<decltype(impl)>;
        if constexpr (std::is_same_v<T, OracleJudge>) {
          return oracle_score(impl, prompt, tokens);
        } else {
          return impl.probability(prompt, tokens);
        }
      },
      j);
}

// ---------------------------------------------------------------------------

Selection select_pair(const RolloutSet& rollout, double tau) {
  if (rollout.responses.size() != rollout.p_halluc.size()) {
    throw ConfigError("rollout set has mismatched responses and scores");
  }
  if (rollout.responses.size() < 2) throw ConfigError("select_pair needs at least two responses");
  int chosen = -1;
  int rejected = -1;
  for (int i = 0; i < static_cast<int>(rollout.p_halluc.size()); ++i) {
    const double p = rollout.p_halluc[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("hallucination score outside [0, 1]");
    if (p < tau) {
      if (chosen < 0 || p < rollout.p_halluc[chosen]) chosen = i;
    } else {
      if (rejected < 0 || p > rollout.p_halluc[rejected]) rejected = i;
    }
  }
  if (rejected < 0) return Filtered{FilterReason::AllClean};
  if (chosen < 0) return Filtered{FilterReason::AllHallucinated};
  return PreferencePair{rollout.prompt, rollout.responses[chosen], rollout.responses[rejected],
                        rollout.p_halluc[chosen], rollout.p_halluc[rejected]};
}

std::vector<Response> rollout_prompt(const Policy& policy, PromptId prompt, int k, const SamplingOptions& sampling,
                                     std::uint64_t seed) {
  if (k < 1) throw ConfigError("k must be >= 1");
  std::vector<Response> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const auto stream = derive_seed(seed, "rollout", (static_cast<std::uint64_t>(prompt) << 20) + static_cast<std::uint64_t>(j));
    out.push_back(sample_response(policy, prompt, sampling, stream));
  }
  return out;
}

namespace {

void check_rollout_options(const RolloutOptions& o) {
  if (o.k < 2) throw ConfigError("k (generations per prompt) must be >= 2");
  if (o.offpolicy_retries < 0) throw ConfigError("offpolicy_retries must be >= 0");
}

}  // namespace

PreferenceDataset build_preference_dataset(const std::vector<PromptRecord>& prompts, const Policy& policy,
                                           const HallucinationJudge& j, const RolloutOptions& options,
                                           std::uint64_t seed) {
  if (prompts.empty()) throw ConfigError("prompt list is empty");
  check_rollout_options(options);

  std::vector<RolloutSet> rollouts(prompts.size());
  parallel_for(prompts.size(), options.workers, [&](std::size_t i) {
    const PromptRecord& prompt = prompts[i];
    RolloutSet& set = rollouts[i];
    set.prompt = prompt.id;
    set.responses = rollout_prompt(policy, prompt.id, options.k, options.sampling, seed);
    for (const Response& r : set.responses) set.p_halluc.push_back(judge(j, prompt, r.tokens));
  });

  PreferenceDataset out;
  for (const RolloutSet& set : rollouts) {
    const Selection s = select_pair(set, options.tau);
    if (const auto* pair = std::get_if<PreferencePair>(&s)) {
      out.pairs.push_back(*pair);
      ++out.stats.admitted;
    } else if (std::get<Filtered>(s).reason == FilterReason::AllClean) {
      ++out.stats.filtered_all_clean;
    } else {
      ++out.stats.filtered_all_halluc;
    }
  }
  out.rollouts = std::move(rollouts);
  return out;
}

PreferenceDataset build_offpolicy_dataset(const std::vector<PromptRecord>& prompts, const Policy& policy,
                                          const HallucinationJudge& j, const RolloutOptions& options,
                                          std::uint64_t seed) {
  if (prompts.empty()) throw ConfigError("prompt list is empty");
  check_rollout_options(options);

  std::vector<std::optional<PreferencePair>> slots(prompts.size());
  std::vector<RolloutSet> rollouts(prompts.size());
  parallel_for(prompts.size(), options.workers, [&](std::size_t i) {
    const PromptRecord& prompt = prompts[i];
    RolloutSet& set = rollouts[i];
    set.prompt = prompt.id;
    const double p_gt = judge(j, prompt, prompt.ground_truth);
    if (!(p_gt < options.tau)) return;
    Response gt{prompt.ground_truth, sequence_log_prob(policy, prompt.id, prompt.ground_truth)};
    for (int round = 0; round <= options.offpolicy_retries; ++round) {
      const auto round_seed = derive_seed(seed, "offpolicy.round", static_cast<std::uint64_t>(round));
      auto responses = rollout_prompt(policy, prompt.id, options.k, options.sampling, round_seed);
      int rejected = -1;
      for (Response& r : responses) {
        const double p = judge(j, prompt, r.tokens);
        set.responses.push_back(std::move(r));
        set.p_halluc.push_back(p);
        const int idx = static_cast<int>(set.p_halluc.size()) - 1;
        if (p >= options.tau && (rejected < 0 || p > set.p_halluc[rejected])) rejected = idx;
      }
      if (rejected >= 0) {
        slots[i] = PreferencePair{prompt.id, gt, set.responses[rejected], p_gt, set.p_halluc[rejected]};
        return;
      }
    }
  });

  PreferenceDataset out;
  for (auto& slot : slots) {
    if (slot) {
      out.pairs.push_back(std::move(*slot));
      ++out.stats.admitted;
    } else {
      ++out.stats.skipped;
    }
  }
  out.rollouts = std::move(rollouts);
  return out;
}

double greedy_hallucination_rate(const Policy& policy, const std::vector<PromptRecord>& prompts, int max_len,
                                 int workers) {
  if (prompts.empty()) return 0.0;
  std::vector<char> halluc(prompts.size(), 0);
  SamplingOptions greedy;
  greedy.greedy = true;
  greedy.max_len = max_len;
  parallel_for(prompts.size(), workers, [&](std::size_t i) {
    const Response r = sample_response(policy, prompts[i].id, greedy, 0);
    halluc[i] = prompts[i].contains_hallucination(r.tokens) ? 1 : 0;
  });
  const auto count = std::count(halluc.begin(), halluc.end(), 1);
  return static_cast<double>(count) / static_cast<double>(prompts.size());
}

}  // namespace rial
