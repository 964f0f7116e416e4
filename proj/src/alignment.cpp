#include "rial/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "rial/error.hpp"
#include "rial/parallel.hpp"
#include "rial/random.hpp"

namespace rial {

namespace {

void check_compatible(const Policy& policy, const Policy& reference) {
  if (!(policy.feature_map() == reference.feature_map())) {
    throw ConfigError("policy and reference must share vocabulary, dimension and feature map");
  }
}

void check_beta(double beta) {
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
}

// log pi(tokens) and optionally its gradient with respect to W, in one pass.
double log_prob_and_gradient(const Policy& policy, const Mat& features, std::span<const TokenId> tokens, Mat* grad) {
  const auto len = static_cast<Eigen::Index>(tokens.size());
  if (len == 0) throw ConfigError("response must contain at least one token");
  const Mat logits = policy.weights().transpose() * features;  // V x L
  Mat residual(policy.vocab(), len);
  double total = 0.0;
  for (Eigen::Index t = 0; t < len; ++t) {
    const TokenId y = tokens[static_cast<std::size_t>(t)];
    if (y < 0 || y >= policy.vocab()) throw ConfigError("token id outside vocabulary");
    const double lse = log_sum_exp(logits.col(t));
    total += logits(y, t) - lse;
    if (grad) {
      residual.col(t) = -(logits.col(t).array() - lse).exp().matrix();
      residual(y, t) += 1.0;
    }
  }
  if (grad) grad->noalias() = features * residual.transpose();
  return total;
}

double margin_of(double beta, double logp_w, double ref_w, double logp_l, double ref_l) {
  return implicit_reward(logp_w, ref_w, beta) - implicit_reward(logp_l, ref_l, beta);
}

}  // namespace

PreparedPair prepare_pair(const PreferencePair& pair, const Policy& reference) {
  PreparedPair p;
  p.pair = &pair;
  const FeatureMap& fmap = reference.feature_map();
  p.chosen_features = fmap.response_features(pair.prompt, pair.chosen.tokens);
  p.rejected_features = fmap.response_features(pair.prompt, pair.rejected.tokens);
  p.reference_chosen = sequence_log_prob(reference, p.chosen_features, pair.chosen.tokens);
  p.reference_rejected = sequence_log_prob(reference, p.rejected_features, pair.rejected.tokens);
  return p;
}

std::vector<PreparedPair> prepare_pairs(std::span<const PreferencePair> pairs, const Policy& reference, int workers) {
  reference.check_finite();
  std::vector<PreparedPair> out(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) { out[i] = prepare_pair(pairs[i], reference); });
  return out;
}

DpoTerms dpo_loss(const PreparedPair& pair, const Policy& policy, double beta) {
  check_beta(beta);
  const double lw = sequence_log_prob(policy, pair.chosen_features, pair.pair->chosen.tokens);
  const double ll = sequence_log_prob(policy, pair.rejected_features, pair.pair->rejected.tokens);
  DpoTerms t;
  t.margin = margin_of(beta, lw, pair.reference_chosen, ll, pair.reference_rejected);
  t.weight = 1.0;
  t.loss = t.weight * -log_sigmoid(t.margin);
  return t;
}

DpoTerms dpo_loss(const PreferencePair& pair, const Policy& policy, const Policy& reference, double beta) {
  check_compatible(policy, reference);
  policy.check_finite();
  return dpo_loss(prepare_pair(pair, reference), policy, beta);
}

DpoTerms weighted_dpo_loss(const PreparedPair& pair, const Policy& policy, double beta, const RaoKupper<double>& rk) {
  DpoTerms t = dpo_loss(pair, policy, beta);
  t.weight = rk.sample_weight(t.margin);
  t.loss = t.weight * -log_sigmoid(t.margin);
  return t;
}

DpoTerms weighted_dpo_loss(const PreferencePair& pair, const Policy& policy, const Policy& reference, double beta,
                           const RaoKupper<double>& rk) {
  check_compatible(policy, reference);
  policy.check_finite();
  return weighted_dpo_loss(prepare_pair(pair, reference), policy, beta, rk);
}

Mat log_prob_gradient(const Policy& policy, const Mat& features, std::span<const TokenId> tokens) {
  Mat g;
  log_prob_and_gradient(policy, features, tokens, &g);
  return g;
}

BatchGradient batch_gradient(std::span<const PreparedPair> batch, const Policy& policy, const GradientOptions& options) {
  if (batch.empty()) throw ConfigError("batch must not be empty");
  check_beta(options.beta);
  if (!(options.nll_weight >= 0.0)) throw ConfigError("nll_weight must be >= 0");
  if (!options.frozen_weights.empty() && options.frozen_weights.size() != batch.size()) {
    throw ConfigError("frozen weights must match the batch size");
  }
  policy.check_finite();

  const double beta = options.beta;
  std::vector<Mat> grads(batch.size());
  std::vector<double> objective(batch.size());
  BatchGradient out;
  out.terms.resize(batch.size());
  parallel_for(batch.size(), options.workers, [&](std::size_t i) {
    const PreparedPair& p = batch[i];
    Mat g_w, g_l;
    const double lw = log_prob_and_gradient(policy, p.chosen_features, p.pair->chosen.tokens, &g_w);
    const double ll = log_prob_and_gradient(policy, p.rejected_features, p.pair->rejected.tokens, &g_l);
    DpoTerms t;
    t.margin = margin_of(beta, lw, p.reference_chosen, ll, p.reference_rejected);
    if (!options.frozen_weights.empty()) {
      t.weight = options.frozen_weights[i];
    } else if (options.rk) {
      t.weight = options.rk->sample_weight(t.margin);
    } else {
      t.weight = 1.0;
    }
    t.loss = t.weight * -log_sigmoid(t.margin);
    // d/dm [-log sigmoid(m)] = -sigmoid(-m); dm/dW = beta (g_w - g_l)
    const double coeff = t.weight * sigmoid(-t.margin) * beta;
    grads[i] = -coeff * (g_w - g_l);
    objective[i] = t.loss;
    if (options.nll_weight > 0.0) {
      grads[i] -= options.nll_weight * g_w;
      objective[i] += options.nll_weight * -lw;
    }
    out.terms[i] = t;
  });

  out.gradient = Mat::Zero(policy.dim(), policy.vocab());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.gradient += grads[i];
    total += objective[i];
  }
  const double n = static_cast<double>(batch.size());
  out.gradient /= n;
  out.objective = total / n;
  return out;
}

Mat weighted_dpo_gradient(std::span<const PreferencePair> batch, const Policy& policy, const Policy& reference,
                          double beta, const RaoKupper<double>& rk) {
  if (batch.empty()) throw ConfigError("batch must not be empty");
  check_compatible(policy, reference);
  const auto prepared = prepare_pairs(batch, reference);
  GradientOptions options;
  options.beta = beta;
  options.rk = &rk;
  return batch_gradient(prepared, policy, options).gradient;
}

Policy nll_regularized_step(std::span<const PreferencePair> batch, const Policy& policy, const Policy& reference,
                            double beta, double learning_rate, double nll_weight) {
  if (batch.empty()) throw ConfigError("batch must not be empty");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  check_compatible(policy, reference);
  const auto prepared = prepare_pairs(batch, reference);
  GradientOptions options;
  options.beta = beta;
  options.nll_weight = nll_weight;
  const BatchGradient g = batch_gradient(prepared, policy, options);
  Policy next = policy;
  next.mutable_weights() -= learning_rate * g.gradient;
  return next;
}

// ---------------------------------------------------------------------------

std::string to_string(PairSource s) { return s == PairSource::OnPolicy ? "onpolicy" : "offpolicy"; }
std::string to_string(LossKind k) { return k == LossKind::Dpo ? "dpo" : "weighted"; }
std::string to_string(WeightMode m) { return m == WeightMode::PerStep ? "per-step" : "per-epoch"; }
std::string to_string(OptimizerKind o) { return o == OptimizerKind::Sgd ? "sgd" : "adam"; }

const StageConfig& TrainingConfig::stage_for(int iteration) const {
  if (schedule.empty()) return stage;
  return schedule.at(static_cast<std::size_t>(iteration - 1));
}

void TrainingConfig::validate() const {
  auto check_stage = [](const StageConfig& s) {
    if (!(s.beta > 0.0)) throw ConfigError("beta must be > 0");
    if (!(s.nu >= 1.0)) throw ConfigError("nu must be >= 1");
    if (!(s.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (s.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (s.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(s.nll_weight >= 0.0)) throw ConfigError("nll_weight must be >= 0");
  };
  check_stage(stage);
  for (const auto& s : schedule) check_stage(s);
  if (total_iterations() < 1) throw ConfigError("iterations must be >= 1");
  if (k < 2) throw ConfigError("k must be >= 2");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
  if (!sampling.greedy && !(sampling.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (sampling.max_len < 1) throw ConfigError("max_len must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  categorize(0.0, thresholds);
}

TrainingConfig paper_recipe(const TrainingConfig& base) {
  TrainingConfig cfg = base;
  cfg.k = 5;
  StageConfig first = base.stage;
  first.source = PairSource::OffPolicy;
  first.loss = LossKind::Dpo;
  first.beta = 0.5;
  first.nu = 1.0;
  first.nll_weight = 0.2;
  first.epochs = 1;
  StageConfig second = base.stage;
  second.source = PairSource::OnPolicy;
  second.loss = LossKind::Weighted;
  second.beta = 0.1;
  second.nu = 3.0;
  second.nll_weight = 0.0;
  second.epochs = 5;
  cfg.schedule = {first, second};
  cfg.iterations = 2;
  return cfg;
}

bool TrainingReport::any_empty() const {
  return std::any_of(iterations.begin(), iterations.end(),
                     [](const IterationRow& r) { return r.status == IterationStatus::EmptyPreferenceSet; });
}

namespace {

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

std::string epochs_csv(const TrainingReport& report) {
  std::ostringstream out;
  out << "iteration,epoch,mean_loss,mean_margin,mean_weight,n_easy,n_hard,n_boundary,pairs\n";
  for (const EpochRow& r : report.epochs) {
    out << r.iteration << ',' << r.epoch << ',' << fmt(r.mean_loss) << ',' << fmt(r.mean_margin) << ','
        << fmt(r.mean_weight) << ',' << r.n_easy << ',' << r.n_hard << ',' << r.n_boundary << ',' << r.pairs << '\n';
  }
  return out.str();
}

std::string iterations_csv(const TrainingReport& report) {
  std::ostringstream out;
  out << "iteration,source,loss,beta,nu,learning_rate,epochs,batch_size,nll_weight,status,admitted,"
         "filtered_all_clean,filtered_all_halluc,skipped,halluc_rate_before,halluc_rate_after\n";
  for (const IterationRow& r : report.iterations) {
    out << r.iteration << ',' << to_string(r.stage.source) << ',' << to_string(r.stage.loss) << ','
        << fmt(r.stage.beta) << ',' << fmt(r.stage.nu) << ',' << fmt(r.stage.learning_rate) << ',' << r.stage.epochs
        << ',' << r.stage.batch_size << ',' << fmt(r.stage.nll_weight) << ','
        << (r.status == IterationStatus::Ok ? "ok" : "empty") << ',' << r.filter.admitted << ','
        << r.filter.filtered_all_clean << ',' << r.filter.filtered_all_halluc << ',' << r.filter.skipped << ','
        << fmt(r.halluc_rate_before) << ',' << fmt(r.halluc_rate_after) << '\n';
  }
  return out.str();
}

std::string weight_histogram_csv(const TrainingReport& report) {
  std::ostringstream out;
  out << "iteration,epoch,bin_lo,bin_hi,count\n";
  for (const EpochRow& r : report.epochs) {
    for (int b = 0; b < static_cast<int>(r.weight_histogram.size()); ++b) {
      out << r.iteration << ',' << r.epoch << ',' << fmt(static_cast<double>(b) / kWeightBins) << ','
          << fmt(static_cast<double>(b + 1) / kWeightBins) << ',' << r.weight_histogram[b] << '\n';
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------

namespace {

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, Eigen::Index rows, Eigen::Index cols)
      : kind_(kind), lr_(learning_rate) {
    if (kind_ == OptimizerKind::Adam) {
      m_ = Mat::Zero(rows, cols);
      v_ = Mat::Zero(rows, cols);
    }
  }

  void apply(Mat& weights, const Mat& grad) {
    if (kind_ == OptimizerKind::Sgd) {
      weights -= lr_ * grad;
      return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    m_ = b1 * m_ + (1.0 - b1) * grad;
    v_ = b2 * v_ + (1.0 - b2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(b1, t_);
    const double c2 = 1.0 - std::pow(b2, t_);
    weights.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps);
  }

 private:
  OptimizerKind kind_;
  double lr_;
  Mat m_, v_;
  int t_ = 0;
};

}  // namespace

Policy train_on_pairs(const Policy& initial, const Policy& reference, std::span<const PreferencePair> pairs,
                      const StageConfig& stage, const TrainingConfig& config, int iteration,
                      std::vector<EpochRow>* rows) {
  if (pairs.empty()) throw EmptyDatasetError("no preference pairs to train on");
  check_compatible(initial, reference);
  const auto prepared = prepare_pairs(pairs, reference, config.workers);
  const RaoKupper<double> rk(stage.nu);

  Policy policy = initial;
  Optimizer opt(config.optimizer, stage.learning_rate, policy.dim(), policy.vocab());
  std::vector<std::size_t> order(prepared.size());
  std::vector<PreparedPair> batch;
  std::vector<double> epoch_weights;
  std::vector<double> batch_weights;

  for (int epoch = 1; epoch <= stage.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(config.seed, "minibatch", (static_cast<std::uint64_t>(iteration) << 20) + static_cast<std::uint64_t>(epoch));
    rng.shuffle(order.begin(), order.end());

    if (stage.loss == LossKind::Weighted && config.weight_mode == WeightMode::PerEpoch) {
      epoch_weights.resize(prepared.size());
      parallel_for(prepared.size(), config.workers, [&](std::size_t i) {
        epoch_weights[i] = rk.sample_weight(dpo_loss(prepared[i], policy, stage.beta).margin);
      });
    }

    EpochRow row;
    row.iteration = iteration;
    row.epoch = epoch;
    row.pairs = static_cast<int>(prepared.size());
    row.weight_histogram.assign(kWeightBins, 0);
    double loss_sum = 0.0, margin_sum = 0.0, weight_sum = 0.0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(stage.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(stage.batch_size));
      batch.clear();
      batch_weights.clear();
      for (std::size_t j = start; j < end; ++j) {
        batch.push_back(prepared[order[j]]);
        if (!epoch_weights.empty()) batch_weights.push_back(epoch_weights[order[j]]);
      }
      GradientOptions options;
      options.beta = stage.beta;
      options.rk = stage.loss == LossKind::Weighted ? &rk : nullptr;
      options.nll_weight = stage.nll_weight;
      options.frozen_weights = batch_weights;
      options.workers = config.workers;
      const BatchGradient g = batch_gradient(batch, policy, options);
      opt.apply(policy.mutable_weights(), g.gradient);
      policy.check_finite();

      for (const DpoTerms& t : g.terms) {
        loss_sum += t.loss;
        margin_sum += t.margin;
        weight_sum += t.weight;
        switch (categorize(t.margin, config.thresholds)) {
          case SampleCategory::Easy: ++row.n_easy; break;
          case SampleCategory::Hard: ++row.n_hard; break;
          case SampleCategory::Boundary: ++row.n_boundary; break;
        }
        const int bin = std::clamp(static_cast<int>(t.weight * kWeightBins), 0, kWeightBins - 1);
        ++row.weight_histogram[bin];
      }
    }
    const double n = static_cast<double>(prepared.size());
    row.mean_loss = loss_sum / n;
    row.mean_margin = margin_sum / n;
    row.mean_weight = weight_sum / n;
    if (rows) rows->push_back(std::move(row));
  }
  return policy;
}

AlignmentResult run_iterative_alignment(const TrainingConfig& config, const std::vector<PromptRecord>& prompts,
                                        const HallucinationJudge& judge, const Policy& initial,
                                        const std::vector<PromptRecord>* eval_prompts) {
  config.validate();
  if (prompts.empty()) throw ConfigError("prompt set is empty");
  const auto& eval = eval_prompts ? *eval_prompts : prompts;

  AlignmentResult result{initial, {}, {}};
  Policy& policy = result.policy;
  TrainingReport& report = result.report;
  const int max_len = config.sampling.max_len;
  report.initial_halluc_rate = greedy_hallucination_rate(policy, eval, max_len, config.workers);
  double rate = report.initial_halluc_rate;

  for (int t = 1; t <= config.total_iterations(); ++t) {
    const StageConfig& stage = config.stage_for(t);
    IterationRow row;
    row.iteration = t;
    row.stage = stage;
    row.halluc_rate_before = rate;

    // Stage 1: preference data from the current policy.
    const Policy reference = policy;
    const std::uint64_t ref_checksum = reference.checksum();
    RolloutOptions ro;
    ro.k = config.k;
    ro.sampling = config.sampling;
    ro.tau = config.tau;
    ro.workers = config.workers;
    ro.offpolicy_retries = config.offpolicy_retries;
    const auto data_seed = derive_seed(config.seed, "iteration", static_cast<std::uint64_t>(t));
    const PreferenceDataset data = stage.source == PairSource::OnPolicy
                                       ? build_preference_dataset(prompts, policy, judge, ro, data_seed)
                                       : build_offpolicy_dataset(prompts, policy, judge, ro, data_seed);
    row.filter = data.stats;

    // Stage 2: train against the frozen previous iterate.
    if (data.pairs.empty()) {
      row.status = IterationStatus::EmptyPreferenceSet;
    } else {
      policy = train_on_pairs(policy, reference, data.pairs, stage, config, t, &report.epochs);
      if (reference.checksum() != ref_checksum) throw NumericalError("reference policy mutated during training");
      rate = greedy_hallucination_rate(policy, eval, max_len, config.workers);
    }
    row.halluc_rate_after = rate;
    report.iterations.push_back(row);
    result.iterates.push_back(policy);
  }
  return result;
}

}  // namespace rial
