#include "rial/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>

#include "rial/alignment.hpp"
#include "rial/parallel.hpp"
#include "rial/random.hpp"

namespace rial {

Policy weight_space_step(const Policy& policy, const Context& context, TokenId target, double learning_rate) {
  if (learning_rate == 0.0) return policy;
  return cross_entropy_step(policy, context, target, learning_rate);
}

Policy policy_with_distribution(const Vec& probs, std::uint64_t feature_seed, int dim) {
  if (probs.size() < 2) throw ConfigError("distribution needs at least two entries");
  if ((probs.array() <= 0.0).any()) throw ConfigError("distribution entries must be positive");
  FeatureMap fmap(feature_seed, dim, static_cast<int>(probs.size()), 0);
  const Vec phi = fmap.features(0, {});
  const Vec z = probs.array().log().matrix();
  Mat w = phi * z.transpose() / phi.squaredNorm();
  return Policy(std::move(fmap), std::move(w));
}

RandomTrajectorySetup random_offpolicy_setup(std::uint64_t seed, int vocab, int steps, double step) {
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  Rng rng(seed, "dynamics.offpolicy");
  Vec p(vocab);
  for (int k = 0; k < vocab; ++k) p[k] = -std::log(rng.uniform_open_low());
  p /= p.sum();
  const TokenId h = TokenDistribution{p}.argmax();

  std::vector<TokenId> others;
  for (int k = 0; k < vocab; ++k) {
    if (k != h) others.push_back(k);
  }
  rng.shuffle(others.begin(), others.end());
  const int extra = std::max(0, std::min(static_cast<int>(std::lround(vocab / 4.0)) - 1,
                                         static_cast<int>(others.size()) - 1));
  RandomTrajectorySetup out;
  out.config.vocab = vocab;
  out.config.initial = p;
  out.config.step = step;
  out.config.steps = steps;
  out.config.halluc_set.push_back(h);
  for (int i = 0; i < extra; ++i) out.config.halluc_set.push_back(others[static_cast<std::size_t>(i)]);
  std::sort(out.config.halluc_set.begin(), out.config.halluc_set.end());
  out.target = others[static_cast<std::size_t>(extra)];
  return out;
}

namespace {

bool in_set(const std::vector<TokenId>& sorted, TokenId t) { return std::binary_search(sorted.begin(), sorted.end(), t); }

TrajectoryRecord make_record(int n, const Vec& p, TokenId h, TokenId y, const std::vector<TokenId>& tracked) {
  TrajectoryRecord r;
  r.step = n;
  r.dist.probs = p;
  r.hallucinated = h;
  r.target = y;
  r.tracked = tracked;
  r.gaps.reserve(tracked.size());
  for (TokenId c : tracked) r.gaps.push_back(p[h] - p[c]);
  return r;
}

}  // namespace

TrajectoryRun run_offpolicy_trajectory(const DynamicsConfig& config, TokenId target) {
  const int vocab = config.vocab;
  if (config.initial.size() != vocab) throw ConfigError("initial distribution size must equal vocab");
  if (std::abs(config.initial.sum() - 1.0) > 1e-9 || (config.initial.array() <= 0.0).any()) {
    throw ConfigError("initial distribution must be strictly positive and sum to 1");
  }
  if (!(config.step > 0.0)) throw ConfigError("step must be > 0");
  if (config.steps < 0) throw ConfigError("steps must be >= 0");
  std::vector<TokenId> hset = config.halluc_set;
  std::sort(hset.begin(), hset.end());
  if (target < 0 || target >= vocab || in_set(hset, target)) throw ConfigError("target must be a non-hallucinated token");
  const TokenId h = TokenDistribution{config.initial}.argmax();
  if (!in_set(hset, h)) throw ConfigError("initial modal token must belong to the hallucination set");

  std::vector<TokenId> tracked = config.tracked;
  if (tracked.empty()) {
    for (int c = 0; c < vocab; ++c) {
      if (c != target && !in_set(hset, c)) tracked.push_back(c);
    }
  }
  for (TokenId c : tracked) {
    if (c == target || c == h || in_set(hset, c)) throw ConfigError("tracked tokens must be correctives other than the target");
  }

  TrajectoryRun run;
  Vec p = config.initial;
  std::optional<Policy> policy;
  double eta = 0.0;
  const Context ctx{0, {}};
  if (config.mode == DynamicsMode::WeightSpace) {
    policy = policy_with_distribution(p, 0x5eed, 16);
    eta = config.step / policy->feature_map().features(0, {}).squaredNorm();
  }

  run.records.push_back(make_record(0, p, h, target, tracked));
  for (int n = 1; n <= config.steps; ++n) {
    Vec next;
    if (config.mode == DynamicsMode::EulerProbability) {
      try {
        next = euler_step<double>(p, target, config.step);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at step " + std::to_string(n), n);
      }
    } else {
      policy = weight_space_step(*policy, ctx, target, eta);
      next = next_token_distribution(*policy, ctx).probs;
    }
    run.max_sum_drift = std::max(run.max_sum_drift, std::abs(next.sum() - 1.0));
    TrajectoryRecord rec = make_record(n, next, h, target, tracked);
    const TrajectoryRecord& prev = run.records.back();
    const double f = next.squaredNorm() - next[target];
    if (next[h] < f - kGapTolerance) ++run.g_bound_violations;
    for (std::size_t i = 0; i < tracked.size(); ++i) {
      ++run.checks;
      if (rec.gaps[i] < prev.gaps[i] - kGapTolerance) ++run.gap_increase_violations;
      if (rec.gaps[i] > prev.gaps[i] + kGapTolerance) ++run.gap_decrease_violations;
      if (rec.gaps[i] < -kGapTolerance) ++run.ordering_violations;
    }
    run.records.push_back(std::move(rec));
    p = std::move(next);
  }
  return run;
}

RemarkSuiteSummary run_remark_suite(std::uint64_t base_seed, int n_seeds, const std::vector<int>& vocab_sizes,
                                    int steps, double step, DynamicsMode mode) {
  if (vocab_sizes.empty()) throw ConfigError("need at least one vocab size");
  RemarkSuiteSummary s;
  for (int i = 0; i < n_seeds; ++i) {
    const int vocab = vocab_sizes[static_cast<std::size_t>(i) % vocab_sizes.size()];
    auto setup = random_offpolicy_setup(derive_seed(base_seed, "remark", static_cast<std::uint64_t>(i)), vocab, steps, step);
    setup.config.mode = mode;
    const TrajectoryRun run = run_offpolicy_trajectory(setup.config, setup.target);
    ++s.runs;
    s.checks += run.checks;
    s.gap_increase_violations += run.gap_increase_violations;
    s.gap_decrease_violations += run.gap_decrease_violations;
    s.g_bound_violations += run.g_bound_violations;
    s.ordering_violations += run.ordering_violations;
    s.max_sum_drift = std::max(s.max_sum_drift, run.max_sum_drift);
  }
  return s;
}

// ---------------------------------------------------------------------------

namespace {

PromptRecord contrast_prompt(const std::vector<TokenId>& halluc_set) {
  PromptRecord rec;
  rec.id = 0;
  rec.halluc_set = halluc_set;
  std::sort(rec.halluc_set.begin(), rec.halluc_set.end());
  return rec;
}

std::optional<TokenId> sample_until(const Policy& policy, Rng& rng, int budget,
                                    const std::function<bool(TokenId)>& accept) {
  const Vec p = next_token_distribution(policy, Context{0, {}}).probs;
  for (int tries = 0; tries < budget; ++tries) {
    const double u = rng.uniform();
    double acc = 0.0;
    TokenId tok = static_cast<TokenId>(p.size() - 1);
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      acc += p[k];
      if (u < acc) {
        tok = static_cast<TokenId>(k);
        break;
      }
    }
    if (accept(tok)) return tok;
  }
  return std::nullopt;
}

PreferencePair single_token_pair(TokenId chosen, TokenId rejected, double pc, double pr) {
  return PreferencePair{0, Response{{chosen}, 0.0}, Response{{rejected}, 0.0}, pc, pr};
}

}  // namespace

ContrastResult run_onpolicy_contrast(const ContrastConfig& config, const Policy& policy,
                                     const HallucinationJudge& judge_impl, int steps) {
  const PromptRecord prompt = contrast_prompt(config.halluc_set);
  const Context ctx{0, {}};
  ContrastResult out;
  out.before = next_token_distribution(policy, ctx);
  out.trajectory.push_back(out.before.probs);
  if (!prompt.is_hallucination(out.before.argmax())) {
    out.flipped = true;
    out.flip_step = 0;
    out.after = out.before;
    return out;
  }

  const Policy reference = policy;
  Policy current = policy;
  Rng rng(config.seed, "contrast.onpolicy");
  auto score = [&](TokenId t) {
    const TokenId tokens[] = {t};
    return judge(judge_impl, prompt, tokens);
  };
  for (int n = 1; n <= steps; ++n) {
    const auto chosen = sample_until(current, rng, config.retry_budget, [&](TokenId t) { return score(t) < kHallucinationThreshold; });
    const auto rejected = sample_until(current, rng, config.retry_budget, [&](TokenId t) { return score(t) >= kHallucinationThreshold; });
    if (!chosen || !rejected) {
      out.sampling_exhausted = true;
      break;
    }
    const PreferencePair pair = single_token_pair(*chosen, *rejected, score(*chosen), score(*rejected));
    current = nll_regularized_step(std::span(&pair, 1), current, reference, config.beta, config.learning_rate, 0.0);
    const Vec p = next_token_distribution(current, ctx).probs;
    out.trajectory.push_back(p);
    out.steps_run = n;
    if (out.flip_step < 0 && !prompt.is_hallucination(TokenDistribution{p}.argmax())) {
      out.flipped = true;
      out.flip_step = n;
    }
  }
  out.after = next_token_distribution(current, ctx);
  return out;
}

ContrastResult run_offpolicy_contrast(const ContrastConfig& config, const Policy& policy, int steps) {
  const PromptRecord prompt = contrast_prompt(config.halluc_set);
  const Context ctx{0, {}};
  const TokenId y = config.offpolicy_target;
  if (y < 0 || y >= policy.vocab() || prompt.is_hallucination(y)) {
    throw ConfigError("off-policy target must be a non-hallucinated token");
  }
  ContrastResult out;
  out.before = next_token_distribution(policy, ctx);
  out.trajectory.push_back(out.before.probs);
  const TokenId h = out.before.argmax();
  if (!prompt.is_hallucination(h)) throw ConfigError("initial modal token must be hallucinated");

  TokenId rejected = prompt.halluc_set.front();
  for (TokenId t : prompt.halluc_set) {
    if (out.before[t] < out.before[rejected]) rejected = t;
  }
  const PreferencePair pair = single_token_pair(y, rejected, 0.0, 1.0);

  auto overtaken = [&](const Vec& p) {
    for (int c = 0; c < p.size(); ++c) {
      if (c != y && !prompt.is_hallucination(c) && p[c] > p[h]) return true;
    }
    return false;
  };
  const Policy reference = policy;
  Policy current = policy;
  for (int n = 1; n <= steps; ++n) {
    current = nll_regularized_step(std::span(&pair, 1), current, reference, config.beta, config.learning_rate, 0.0);
    const Vec p = next_token_distribution(current, ctx).probs;
    out.trajectory.push_back(p);
    out.steps_run = n;
    if (out.flip_step < 0 && overtaken(p)) {
      out.flipped = true;
      out.flip_step = n;
    }
  }
  out.after = next_token_distribution(current, ctx);
  return out;
}

// ---------------------------------------------------------------------------

PreferencePair low_support_pair(const Policy& reference, PromptId prompt, int len) {
  std::vector<TokenId> chosen;
  for (int t = 0; t < len; ++t) {
    const Vec p = next_token_distribution(reference, reference.feature_map().features(prompt, chosen)).probs;
    Eigen::Index k;
    p.minCoeff(&k);
    chosen.push_back(static_cast<TokenId>(k));
  }
  return support_pair(reference, prompt, std::move(chosen));
}

PreferencePair support_pair(const Policy& reference, PromptId prompt, std::vector<TokenId> chosen) {
  SamplingOptions greedy;
  greedy.greedy = true;
  greedy.max_len = static_cast<int>(chosen.size());
  Response rejected = sample_response(reference, prompt, greedy, 0);
  Response c{chosen, sequence_log_prob(reference, prompt, chosen)};
  return PreferencePair{prompt, std::move(c), std::move(rejected), 0.0, 1.0};
}

SupportProbeResult support_suppression_probe(const Policy& reference, const std::vector<PreferencePair>& pairs,
                                             const SupportProbeConfig& config) {
  SupportProbeResult out;
  out.entries.resize(pairs.size());
  std::vector<PreferencePair> trainable;
  std::vector<std::size_t> slot;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& toks = pairs[i].chosen.tokens;
    const bool unreachable = std::any_of(toks.begin(), toks.end(), [&](TokenId t) { return t < 0 || t >= reference.vocab(); });
    if (unreachable) {
      out.entries[i].unreachable = true;
      continue;
    }
    out.entries[i].reference_prob = std::exp(sequence_log_prob(reference, pairs[i].prompt, toks));
    trainable.push_back(pairs[i]);
    slot.push_back(i);
  }
  if (trainable.empty()) return out;

  // each pair is trained on its own so pairs for different prompts cannot interfere
  parallel_for(trainable.size(), 1, [&](std::size_t j) {
    const auto prepared = prepare_pairs(std::span(&trainable[j], 1), reference);
    Policy policy = reference;
    GradientOptions options;
    options.beta = config.beta;
    for (int n = 0; n < config.steps; ++n) {
      policy.mutable_weights() -= config.learning_rate * batch_gradient(prepared, policy, options).gradient;
    }
    out.entries[slot[j]].final_prob =
        std::exp(sequence_log_prob(policy, prepared[0].chosen_features, trainable[j].chosen.tokens));
  });
  for (std::size_t j : slot) {
    if (!(out.entries[j].final_prob < config.ceiling)) out.all_below_ceiling = false;
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

std::string trajectory_csv(const TrajectoryRun& run) {
  std::ostringstream out;
  if (run.records.empty()) return "step\n";
  const auto& first = run.records.front();
  out << "step";
  for (int k = 0; k < first.dist.size(); ++k) out << ",p_" << k;
  for (TokenId c : first.tracked) out << ",d_" << c;
  out << '\n';
  for (const auto& r : run.records) {
    out << r.step;
    for (int k = 0; k < r.dist.size(); ++k) out << ',' << fmt(r.dist[k]);
    for (double g : r.gaps) out << ',' << fmt(g);
    out << '\n';
  }
  return out.str();
}

std::string distribution_trajectory_csv(const std::vector<Vec>& trajectory) {
  std::ostringstream out;
  out << "step";
  if (!trajectory.empty()) {
    for (int k = 0; k < trajectory.front().size(); ++k) out << ",p_" << k;
  }
  out << '\n';
  for (std::size_t n = 0; n < trajectory.size(); ++n) {
    out << n;
    for (int k = 0; k < trajectory[n].size(); ++k) out << ',' << fmt(trajectory[n][k]);
    out << '\n';
  }
  return out.str();
}

}  // namespace rial
