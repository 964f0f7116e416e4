#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>

#include "rial/alignment.hpp"
#include "rial/error.hpp"
#include "rial/random.hpp"

using namespace rial;

namespace {

std::vector<TokenId> random_tokens(Rng& rng, int vocab, int len) {
  std::vector<TokenId> t;
  for (int i = 0; i < len; ++i) t.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab))));
  return t;
}

PreferencePair random_pair(Rng& rng, int vocab) {
  PreferencePair p;
  p.prompt = static_cast<PromptId>(rng.below(20));
  p.chosen.tokens = random_tokens(rng, vocab, 1 + static_cast<int>(rng.below(4)));
  p.rejected.tokens = random_tokens(rng, vocab, 1 + static_cast<int>(rng.below(4)));
  return p;
}

long double log_sigmoid_ld(long double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

// -log sigmoid(beta * ((lp_w - ref_w) - (lp_l - ref_l))) from four independent
// sequence_log_prob calls.
long double compositional_loss(const PreferencePair& pair, const Policy& policy, const Policy& ref, double beta) {
  const long double m = static_cast<long double>(beta) *
                        ((static_cast<long double>(sequence_log_prob(policy, pair.prompt, pair.chosen.tokens)) -
                          sequence_log_prob(ref, pair.prompt, pair.chosen.tokens)) -
                         (static_cast<long double>(sequence_log_prob(policy, pair.prompt, pair.rejected.tokens)) -
                          sequence_log_prob(ref, pair.prompt, pair.rejected.tokens)));
  return -log_sigmoid_ld(m);
}

Mat finite_difference(const Policy& policy, const std::function<double(const Policy&)>& f, double h = 1e-5) {
  Mat g(policy.weights().rows(), policy.weights().cols());
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      Policy plus = policy, minus = policy;
      plus.mutable_weights()(i, j) += h;
      minus.mutable_weights()(i, j) -= h;
      g(i, j) = (f(plus) - f(minus)) / (2.0 * h);
    }
  }
  return g;
}

double relative_error(const Mat& analytic, const Mat& numeric) {
  return (analytic - numeric).norm() / std::max(numeric.norm(), 1e-12);
}

}  // namespace

TEST_CASE("dpo loss at policy == reference is ln 2") {
  const Policy p = Policy::random(FeatureMap(1, 8, 6, 2), 1.0, 2);
  Rng rng(3);
  const auto pair = random_pair(rng, 6);
  const auto t = dpo_loss(pair, p, p, 0.1);
  CHECK(t.margin == 0.0);
  CHECK(std::abs(t.loss - std::log(2.0)) < 1e-15);
}

TEST_CASE("dpo loss saturates for large margins") {
  const Policy p = Policy::random(FeatureMap(1, 8, 6, 2), 1.0, 2);
  Rng rng(3);
  const auto pair = random_pair(rng, 6);
  PreparedPair prep = prepare_pair(pair, p);
  prep.reference_chosen -= 100.0;  // margin +10 at beta 0.1
  const auto t = dpo_loss(prep, p, 0.1);
  CHECK(t.margin == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(t.loss < 5e-5);
}

TEST_CASE("dpo loss matches the compositional oracle") {
  Rng rng(11);
  for (int i = 0; i < 30; ++i) {
    const Policy ref = Policy::random(FeatureMap(100 + i, 8, 7, 2), 1.0, 200 + i);
    const Policy pol = Policy::random(FeatureMap(100 + i, 8, 7, 2), 1.0, 300 + i);
    const auto pair = random_pair(rng, 7);
    const double beta = 0.05 + rng.uniform();
    const auto t = dpo_loss(pair, pol, ref, beta);
    CHECK(std::abs(t.loss - static_cast<double>(compositional_loss(pair, pol, ref, beta))) < 1e-12);
  }
}

TEST_CASE("weighted dpo loss") {
  const Policy ref = Policy::random(FeatureMap(5, 8, 7, 2), 1.0, 6);
  const Policy pol = Policy::random(FeatureMap(5, 8, 7, 2), 1.0, 7);
  Rng rng(5);

  SUBCASE("nu = 1 is plain DPO, bitwise") {
    const RaoKupper<double> rk(1.0);
    for (int i = 0; i < 50; ++i) {
      const auto pair = random_pair(rng, 7);
      const auto a = dpo_loss(pair, pol, ref, 0.1);
      const auto b = weighted_dpo_loss(pair, pol, ref, 0.1, rk);
      CHECK(a.loss == b.loss);
      CHECK(a.margin == b.margin);
      CHECK(b.weight == 1.0);
    }
  }

  SUBCASE("nu = 3 at zero margin is ln 2") {
    const auto pair = random_pair(rng, 7);
    const auto t = weighted_dpo_loss(pair, pol, pol, 0.1, RaoKupper<double>(3.0));
    CHECK(t.weight == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(t.loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }

  SUBCASE("nu = 3 at margin 8 is half the plain loss") {
    const auto pair = random_pair(rng, 7);
    PreparedPair prep = prepare_pair(pair, pol);
    prep.reference_chosen -= 80.0;
    const auto t = weighted_dpo_loss(prep, pol, 0.1, RaoKupper<double>(3.0));
    CHECK(t.margin == doctest::Approx(8.0).epsilon(1e-12));
    const long double plain = -log_sigmoid_ld(8.0L);
    CHECK(t.loss == doctest::Approx(static_cast<double>(0.5L * plain)).epsilon(1e-3));
    CHECK(t.loss > 0.5 * static_cast<double>(plain));
  }
}

TEST_CASE("log-prob gradient matches finite differences") {
  Rng rng(8);
  for (int i = 0; i < 10; ++i) {
    const Policy p = Policy::random(FeatureMap(40 + i, 6, 5, 2), 1.0, 50 + i);
    const auto y = random_tokens(rng, 5, 3);
    const Mat phi = p.feature_map().response_features(2, y);
    const Mat g = log_prob_gradient(p, phi, y);
    const Mat n = finite_difference(p, [&](const Policy& q) { return sequence_log_prob(q, phi, y); });
    CHECK(relative_error(g, n) < 1e-5);
  }
}

TEST_CASE("weighted dpo gradient matches finite differences with the weight frozen") {
  Rng rng(9);
  const RaoKupper<double> rk(3.0);
  for (int i = 0; i < 10; ++i) {
    const Policy ref = Policy::random(FeatureMap(60 + i, 6, 5, 2), 1.0, 70 + i);
    const Policy pol = Policy::random(FeatureMap(60 + i, 6, 5, 2), 1.0, 80 + i);
    std::vector<PreferencePair> batch;
    for (int b = 0; b < 3; ++b) batch.push_back(random_pair(rng, 5));
    std::vector<double> w;
    for (const auto& pair : batch) w.push_back(weighted_dpo_loss(pair, pol, ref, 0.5, rk).weight);
    const Mat g = weighted_dpo_gradient(batch, pol, ref, 0.5, rk);
    const Mat n = finite_difference(pol, [&](const Policy& q) {
      double total = 0.0;
      for (std::size_t b = 0; b < batch.size(); ++b) total += w[b] * dpo_loss(batch[b], q, ref, 0.5).loss;
      return total / static_cast<double>(batch.size());
    });
    CHECK(relative_error(g, n) < 1e-5);
  }
}

TEST_CASE("symmetric pair at policy == reference has zero gradient") {
  const Policy p = Policy::random(FeatureMap(1, 8, 6, 2), 1.0, 2);
  PreferencePair pair;
  pair.prompt = 3;
  pair.chosen.tokens = {1, 4, 5};
  pair.rejected.tokens = {1, 4, 5};
  const std::vector<PreferencePair> batch{pair};
  CHECK(weighted_dpo_gradient(batch, p, p, 0.1, RaoKupper<double>(3.0)).norm() <= 1e-12);
}

TEST_CASE("swapping chosen and rejected at nu = 1") {
  // grad(-log sigmoid(m)) = -sigmoid(-m) grad m; swapped: sigmoid(m) grad m
  Rng rng(10);
  const RaoKupper<double> rk(1.0);
  for (int i = 0; i < 10; ++i) {
    const Policy ref = Policy::random(FeatureMap(90 + i, 6, 5, 2), 1.0, 91 + i);
    const Policy pol = Policy::random(FeatureMap(90 + i, 6, 5, 2), 1.0, 92 + i);
    PreferencePair pair = random_pair(rng, 5);
    PreferencePair swapped = pair;
    std::swap(swapped.chosen, swapped.rejected);
    const double m = dpo_loss(pair, pol, ref, 0.2).margin;
    const Mat g = weighted_dpo_gradient(std::vector<PreferencePair>{pair}, pol, ref, 0.2, rk);
    const Mat gs = weighted_dpo_gradient(std::vector<PreferencePair>{swapped}, pol, ref, 0.2, rk);
    const Mat predicted = -(sigmoid(m) / sigmoid(-m)) * g;
    CHECK((gs - predicted).norm() <= 1e-12 * std::max(1.0, g.norm()));
  }
}

TEST_CASE("NLL-regularized objective gradient matches finite differences") {
  Rng rng(12);
  for (int i = 0; i < 10; ++i) {
    const Policy ref = Policy::random(FeatureMap(120 + i, 6, 5, 2), 1.0, 121 + i);
    const Policy pol = Policy::random(FeatureMap(120 + i, 6, 5, 2), 1.0, 122 + i);
    std::vector<PreferencePair> batch;
    for (int b = 0; b < 3; ++b) batch.push_back(random_pair(rng, 5));
    const auto prepared = prepare_pairs(batch, ref);
    GradientOptions o;
    o.beta = 0.5;
    o.nll_weight = 0.2;
    const Mat g = batch_gradient(prepared, pol, o).gradient;
    const Mat n = finite_difference(pol, [&](const Policy& q) { return batch_gradient(prepared, q, o).objective; });
    CHECK(relative_error(g, n) < 1e-5);
  }
}

TEST_CASE("nll_regularized_step") {
  Rng rng(13);
  const Policy ref = Policy::random(FeatureMap(7, 8, 6, 2), 1.0, 8);
  std::vector<PreferencePair> batch;
  for (int b = 0; b < 4; ++b) batch.push_back(random_pair(rng, 6));

  SUBCASE("zero NLL weight is a plain DPO step") {
    const Policy pol = Policy::random(FeatureMap(7, 8, 6, 2), 1.0, 9);
    const Policy a = nll_regularized_step(batch, pol, ref, 0.1, 0.3, 0.0);
    const Mat expected = pol.weights() - 0.3 * weighted_dpo_gradient(batch, pol, ref, 0.1, RaoKupper<double>(1.0));
    CHECK(a.weights() == expected);
  }

  SUBCASE("chosen NLL decreases over 50 steps with weight 0.2") {
    auto nll = [&](const Policy& p) {
      double total = 0.0;
      for (const auto& pair : batch) total -= sequence_log_prob(p, pair.prompt, pair.chosen.tokens);
      return total;
    };
    Policy p = ref;
    const double before = nll(p);
    for (int s = 0; s < 50; ++s) p = nll_regularized_step(batch, p, ref, 0.5, 0.5, 0.2);
    CHECK(nll(p) < before);
  }
}

TEST_CASE("batch gradient does not depend on the worker count") {
  Rng rng(14);
  const Policy ref = Policy::random(FeatureMap(7, 8, 6, 2), 1.0, 8);
  const Policy pol = Policy::random(FeatureMap(7, 8, 6, 2), 1.0, 10);
  std::vector<PreferencePair> batch;
  for (int b = 0; b < 33; ++b) batch.push_back(random_pair(rng, 6));
  const auto prepared = prepare_pairs(batch, ref, 3);
  const RaoKupper<double> rk(3.0);
  GradientOptions o;
  o.rk = &rk;
  o.workers = 1;
  const auto a = batch_gradient(prepared, pol, o);
  o.workers = 5;
  const auto b = batch_gradient(prepared, pol, o);
  CHECK(a.gradient == b.gradient);
  CHECK(a.objective == b.objective);
}

TEST_CASE("invalid training configuration is rejected") {
  TrainingConfig c;
  c.stage.beta = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.stage.nu = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.k = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(TrainingConfig{}.validate());
}

TEST_CASE("paper recipe shape") {
  TrainingConfig base;
  base.stage.learning_rate = 3.0;
  const TrainingConfig c = paper_recipe(base);
  REQUIRE(c.total_iterations() == 2);
  const auto& s1 = c.stage_for(1);
  const auto& s2 = c.stage_for(2);
  CHECK(s1.source == PairSource::OffPolicy);
  CHECK(s1.beta == 0.5);
  CHECK(s1.nll_weight == 0.2);
  CHECK(s1.loss == LossKind::Dpo);
  CHECK(s2.source == PairSource::OnPolicy);
  CHECK(s2.loss == LossKind::Weighted);
  CHECK(s2.beta == 0.1);
  CHECK(s2.nu == 3.0);
  CHECK(s2.learning_rate == 3.0);
  CHECK(c.k == 5);
}

namespace {

struct SmallRun {
  std::vector<PromptRecord> prompts = generate_task(21, 8, 10, 0.3);
  Policy initial = Policy::random(FeatureMap(22, 16, 10, 2), 1.0, 23);
};

}  // namespace

TEST_CASE("iterative alignment produces only admissible pairs") {
  SmallRun run;
  TrainingConfig c;
  c.k = 2;
  c.seed = 4;
  const auto data = build_preference_dataset(run.prompts, run.initial, OracleJudge{}, {2, {}, 0.5, 1, 3}, 4);
  for (const auto& pair : data.pairs) {
    CHECK(pair.p_halluc_chosen < 0.5);
    CHECK(pair.p_halluc_rejected >= 0.5);
  }
  const auto result = run_iterative_alignment(c, run.prompts, OracleJudge{}, run.initial);
  CHECK(result.report.iterations.size() == 1);
}

TEST_CASE("paper recipe report has both iterations and is reproducible") {
  SmallRun run;
  TrainingConfig base;
  base.seed = 5;
  base.stage.learning_rate = 10.0;
  const auto c = paper_recipe(base);
  const auto a = run_iterative_alignment(c, run.prompts, OracleJudge{}, run.initial);
  const auto b = run_iterative_alignment(c, run.prompts, OracleJudge{}, run.initial);
  REQUIRE(a.report.iterations.size() == 2);
  CHECK(a.report.iterations[0].stage.beta == 0.5);
  CHECK(a.report.iterations[1].stage.nu == 3.0);
  CHECK(a.iterates.size() == 2);
  CHECK(checkpoint_text(a.policy) == checkpoint_text(b.policy));
  CHECK(epochs_csv(a.report) == epochs_csv(b.report));
  const std::string csv = iterations_csv(a.report);
  CHECK(csv.rfind("iteration,source,loss,beta,nu,", 0) == 0);
}

TEST_CASE("an empty preference set is reported, not trained on") {
  // every token except the end token is a hallucination: all rollouts are
  // hallucinated unless they are the bare end token
  std::vector<PromptRecord> prompts(4);
  for (int i = 0; i < 4; ++i) {
    prompts[static_cast<std::size_t>(i)].id = i;
    prompts[static_cast<std::size_t>(i)].ground_truth = {5};
    prompts[static_cast<std::size_t>(i)].halluc_set = {0, 1, 2, 3, 4};
  }
  Policy initial(FeatureMap(1, 8, 6, 2));
  initial.mutable_weights().col(5).setConstant(-50.0);
  TrainingConfig c;
  c.seed = 1;
  const auto result = run_iterative_alignment(c, prompts, OracleJudge{}, initial);
  REQUIRE(result.report.iterations.size() == 1);
  CHECK(result.report.iterations[0].status == IterationStatus::EmptyPreferenceSet);
  CHECK(result.report.any_empty());
  CHECK(result.policy.weights() == initial.weights());
}

TEST_CASE("Adam and per-epoch weights run and stay finite") {
  SmallRun run;
  TrainingConfig c;
  c.seed = 2;
  c.optimizer = OptimizerKind::Adam;
  c.weight_mode = WeightMode::PerEpoch;
  c.stage.learning_rate = 0.05;
  const auto result = run_iterative_alignment(c, run.prompts, OracleJudge{}, run.initial);
  CHECK_NOTHROW(result.policy.check_finite());
  for (const auto& row : result.report.epochs) {
    int total = 0;
    for (int n : row.weight_histogram) total += n;
    CHECK(total == row.pairs);
    CHECK(row.n_easy + row.n_hard + row.n_boundary == row.pairs);
  }
}
