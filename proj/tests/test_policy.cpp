#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "rial/dynamics.hpp"
#include "rial/error.hpp"
#include "rial/policy.hpp"
#include "rial/random.hpp"

using namespace rial;

namespace {

// softmax evaluated term by term in long double
std::vector<long double> reference_softmax(const std::vector<long double>& z) {
  long double total = 0.0L;
  std::vector<long double> e;
  for (long double v : z) {
    e.push_back(std::exp(v));
    total += e.back();
  }
  for (auto& v : e) v /= total;
  return e;
}

Policy one_dim_policy(const std::vector<double>& logits) {
  Mat w(1, static_cast<Eigen::Index>(logits.size()));
  for (std::size_t k = 0; k < logits.size(); ++k) w(0, static_cast<Eigen::Index>(k)) = logits[k];
  return Policy(FeatureMap(1, 1, static_cast<int>(logits.size()), 0), w);
}

}  // namespace

TEST_CASE("zero weights give the uniform distribution") {
  Policy p(FeatureMap(3, 8, 5, 2));
  const std::vector<TokenId> prefix{1, 2};
  const auto dist = next_token_distribution(p, Context{4, prefix});
  for (int k = 0; k < 5; ++k) CHECK(dist[k] == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("softmax of hand-picked logits") {
  Vec phi(1);
  phi << 1.0;
  {
    const auto d = next_token_distribution(one_dim_policy({1, 1, 1}), phi);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(d[k] - 1.0 / 3.0) < 1e-15);
  }
  const auto d = next_token_distribution(one_dim_policy({std::log(2.0), 0, 0}), phi);
  const auto ref = reference_softmax({std::log(2.0L), 0.0L, 0.0L});
  CHECK(std::abs(d[0] - 0.5) < 1e-15);
  CHECK(std::abs(d[1] - 0.25) < 1e-15);
  for (int k = 0; k < 3; ++k) CHECK(std::abs(d[k] - static_cast<double>(ref[static_cast<std::size_t>(k)])) < 1e-15);
}

TEST_CASE("large logits do not overflow") {
  Vec phi(1);
  phi << 1.0;
  const auto d = next_token_distribution(one_dim_policy({1000, 999, -1000}), phi);
  CHECK(std::isfinite(d[0]));
  CHECK(d.probs.sum() == doctest::Approx(1.0));
  CHECK(d.argmax() == 0);
}

TEST_CASE("argmax prefers the lowest id on ties") {
  TokenDistribution d;
  d.probs = Vec::Constant(4, 0.25);
  CHECK(d.argmax() == 0);
}

TEST_CASE("sequence log-prob under a uniform policy") {
  Policy p(FeatureMap(9, 4, 4, 2));
  const std::vector<TokenId> one{2};
  const std::vector<TokenId> two{2, 1};
  CHECK(sequence_log_prob(p, 0, one) == doctest::Approx(-1.386294).epsilon(1e-6));
  CHECK(sequence_log_prob(p, 0, two) == doctest::Approx(-2.772589).epsilon(1e-6));
}

TEST_CASE("sequence log-prob is the chain of next-token probabilities") {
  const Policy p = Policy::random(FeatureMap(11, 16, 9, 2), 1.0, 12);
  const std::vector<TokenId> y{3, 0, 7, 8};
  long double brute = 0.0L;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const std::vector<TokenId> prefix(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(t));
    brute += std::log(static_cast<long double>(next_token_distribution(p, Context{5, prefix})[y[t]]));
  }
  CHECK(std::abs(sequence_log_prob(p, 5, y) - static_cast<double>(brute)) < 1e-12);
  CHECK(sequence_log_prob(p, 5, y) == sequence_log_prob(p, p.feature_map().response_features(5, y), y));
}

TEST_CASE("empty response is rejected") {
  Policy p(FeatureMap(9, 4, 4, 2));
  CHECK_THROWS_AS(sequence_log_prob(p, 0, std::vector<TokenId>{}), ConfigError);
  CHECK_THROWS_AS(sequence_log_prob(p, 0, std::vector<TokenId>{4}), ConfigError);
}

TEST_CASE("features depend only on the last window tokens") {
  FeatureMap f(5, 8, 6, 2);
  const std::vector<TokenId> a{1, 2, 3};
  const std::vector<TokenId> b{4, 2, 3};
  CHECK((f.features(0, a) - f.features(0, b)).norm() == 0.0);
  const std::vector<TokenId> c{1, 3, 2};
  CHECK((f.features(0, a) - f.features(0, c)).norm() > 0.0);
  CHECK((f.features(0, a) - f.features(1, a)).norm() > 0.0);
}

TEST_CASE("sampling") {
  const Policy p = Policy::random(FeatureMap(21, 16, 8, 2), 1.0, 22);

  SUBCASE("same seed gives the same response") {
    SamplingOptions o;
    CHECK(sample_response(p, 3, o, 99) == sample_response(p, 3, o, 99));
  }

  SUBCASE("greedy takes the argmax every step") {
    SamplingOptions o;
    o.greedy = true;
    const Response r = sample_response(p, 3, o, 1);
    for (std::size_t t = 0; t < r.tokens.size(); ++t) {
      const std::vector<TokenId> prefix(r.tokens.begin(), r.tokens.begin() + static_cast<std::ptrdiff_t>(t));
      CHECK(r.tokens[t] == next_token_distribution(p, Context{3, prefix}).argmax());
    }
  }

  SUBCASE("responses stop at the end token or max_len") {
    SamplingOptions o;
    o.max_len = 4;
    for (std::uint64_t s = 0; s < 200; ++s) {
      const Response r = sample_response(p, 1, o, s);
      REQUIRE(!r.tokens.empty());
      CHECK(r.tokens.size() <= 4);
      for (std::size_t t = 0; t + 1 < r.tokens.size(); ++t) CHECK(r.tokens[t] != p.end_token());
      CHECK(r.log_prob == doctest::Approx(sequence_log_prob(p, 1, r.tokens)).epsilon(1e-12));
    }
  }

  SUBCASE("empirical frequencies match the distribution") {
    Vec target(3);
    target << 0.5, 0.3, 0.2;
    const Policy q = policy_with_distribution(target, 4);
    SamplingOptions o;
    o.max_len = 1;
    std::vector<int> counts(3, 0);
    const int n = 10000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_response(q, 0, o, derive_seed(77, "mc", i)).tokens[0])];
    for (int k = 0; k < 3; ++k) CHECK(std::abs(counts[static_cast<std::size_t>(k)] / double(n) - target[k]) < 0.02);
  }

  SUBCASE("non-positive temperature is rejected") {
    SamplingOptions o;
    o.temperature = 0.0;
    CHECK_THROWS_AS(sample_response(p, 0, o, 0), ConfigError);
  }
}

TEST_CASE("cross-entropy step moves logits by eta |phi|^2 (e_y - p)") {
  Vec target(3);
  target << 0.5, 0.3, 0.2;
  const Policy p = policy_with_distribution(target, 8);
  const Context ctx{0, {}};
  const Vec phi = p.feature_map().features(0, {});
  const Policy q = cross_entropy_step(p, ctx, 0, 0.1);
  const Vec delta = (q.logits(phi) - p.logits(phi)) / phi.squaredNorm();
  CHECK(std::abs(delta[0] - 0.05) < 1e-12);
  CHECK(std::abs(delta[1] + 0.03) < 1e-12);
  CHECK(std::abs(delta[2] + 0.02) < 1e-12);
  CHECK_THROWS_AS(cross_entropy_step(p, ctx, 0, 0.0), ConfigError);
  CHECK_THROWS_AS(cross_entropy_step(p, ctx, 3, 0.1), ConfigError);
}

TEST_CASE("cross-entropy step at a one-hot distribution barely moves") {
  Vec target(3);
  target << 1.0 - 2e-13, 1e-13, 1e-13;
  const Policy p = policy_with_distribution(target, 8);
  const Vec phi = p.feature_map().features(0, {});
  const double eta = 0.5;
  const Policy q = cross_entropy_step(p, Context{0, {}}, 0, eta);
  CHECK((q.weights() - p.weights()).norm() <= eta * 1e-12 * phi.norm());
}

TEST_CASE("checkpoint round trip is exact") {
  const Policy p = Policy::random(FeatureMap(31, 12, 7, 3), 0.7, 32);
  const Policy q = parse_checkpoint(checkpoint_text(p));
  CHECK(q.weights() == p.weights());
  CHECK(q.checksum() == p.checksum());
  CHECK(q.feature_map().seed() == p.feature_map().seed());
  CHECK(q.feature_map().window() == 3);
  CHECK(checkpoint_text(q) == checkpoint_text(p));
}

TEST_CASE("malformed checkpoints are rejected") {
  const std::string good = checkpoint_text(Policy::random(FeatureMap(1, 2, 3, 1), 1.0, 2));
  CHECK_THROWS_AS(parse_checkpoint(""), ConfigError);
  CHECK_THROWS_AS(parse_checkpoint(good.substr(0, good.size() / 2)), ConfigError);
  CHECK_THROWS_AS(parse_checkpoint(good + "1 2 3\n"), ConfigError);
  std::string bad = good;
  bad.replace(bad.find("schema_version 1"), 16, "schema_version 9");
  CHECK_THROWS_AS(parse_checkpoint(bad), ConfigError);
}

TEST_CASE("non-finite weights are detected") {
  Policy p(FeatureMap(1, 2, 3, 1));
  p.mutable_weights()(1, 1) = std::nan("");
  CHECK_THROWS_AS(p.check_finite(), NumericalError);
}

TEST_CASE("seed derivation") {
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a", 0) != derive_seed(1, "a", 1));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
  Rng a(5, "x"), b(5, "x");
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng u(6);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform_open_low();
    CHECK(x > 0.0);
    CHECK(x <= 1.0);
  }
}
