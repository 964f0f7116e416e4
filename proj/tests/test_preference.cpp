#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rial/error.hpp"
#include "rial/preference.hpp"
#include "rial/random.hpp"

using namespace rial;

namespace {

// Rao-Kupper in the textbook exponential form, long double.
struct TextbookRk {
  long double win, lose, tie;
};

TextbookRk textbook(long double ri, long double rj, long double nu) {
  const long double a = std::exp(ri), b = std::exp(rj);
  return {a / (a + nu * b), b / (b + nu * a), (nu * nu - 1) * a * b / ((a + nu * b) * (b + nu * a))};
}

}  // namespace

TEST_CASE("implicit reward") {
  CHECK(implicit_reward(-3.0, -3.0, 0.1) == 0.0);
  CHECK(implicit_reward(0.0, -2.0, 0.1) == doctest::Approx(0.2));
  CHECK(implicit_reward(-1.0, 0.0, 0.5) == doctest::Approx(-0.5));
  CHECK_THROWS_AS(implicit_reward(0.0, 0.0, 0.0), ConfigError);
  const ImplicitRewardMargin m{0.7, 0.2};
  CHECK(m.margin() == doctest::Approx(0.5));
}

TEST_CASE("Rao-Kupper at equal rewards") {
  const RaoKupper<double> rk(3.0);
  const auto p = rk.probabilities(0.4, 0.4);
  CHECK(p.win == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(p.lose == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(p.tie == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("Rao-Kupper with nu = 1 is Bradley-Terry") {
  const RaoKupper<double> rk(1.0);
  for (double d : {-7.0, -0.3, 0.0, 2.5, 30.0}) {
    const auto p = rk.probabilities(d, 0.0);
    CHECK(p.tie == 0.0);
    CHECK(std::abs(p.win - bradley_terry(d, 0.0)) < 1e-15);
    CHECK(std::abs(p.lose - bradley_terry(0.0, d)) < 1e-15);
  }
}

TEST_CASE("tie probability is tiny and symmetric far from zero") {
  const RaoKupper<double> rk(3.0);
  CHECK(rk.tie_probability(10.0) < 4e-4);
  CHECK(std::abs(rk.tie_probability(10.0) - rk.tie_probability(-10.0)) <= 1e-15);
  CHECK(std::isfinite(rk.tie_probability(1e6)));
  CHECK(rk.tie_probability(1e6) >= 0.0);
}

TEST_CASE("Rao-Kupper matches the textbook form") {
  Rng rng(17);
  for (int i = 0; i < 2000; ++i) {
    const double ri = 6.0 * rng.normal(), rj = 6.0 * rng.normal(), nu = 1.0 + 9.0 * rng.uniform();
    const auto p = RaoKupper<double>(nu).probabilities(ri, rj);
    const auto q = textbook(ri, rj, nu);
    CHECK(std::abs(p.win - static_cast<double>(q.win)) < 1e-13);
    CHECK(std::abs(p.lose - static_cast<double>(q.lose)) < 1e-13);
    CHECK(std::abs(p.tie - static_cast<double>(q.tie)) < 1e-13);
  }
}

TEST_CASE("flipped win convention swaps win and lose only") {
  const RaoKupper<double> classical(2.0), flipped(2.0, WinConvention::Flipped);
  const auto a = classical.probabilities(1.5, -0.5);
  const auto b = flipped.probabilities(1.5, -0.5);
  CHECK(a.win == b.lose);
  CHECK(a.lose == b.win);
  CHECK(a.tie == b.tie);
  CHECK(a.win > a.lose);
}

TEST_CASE("sample weight") {
  const RaoKupper<double> one(1.0), three(3.0);
  for (double m : {-40.0, -1.0, 0.0, 0.3, 12.0}) CHECK(one.sample_weight(m) == 1.0);
  CHECK(three.sample_weight(0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(three.sample_weight(60.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(three.sample_weight(-60.0) == doctest::Approx(0.5).epsilon(1e-15));
  double prev = three.sample_weight(0.0);
  for (double m = 0.25; m < 20.0; m += 0.25) {
    const double w = three.sample_weight(m);
    CHECK(w < prev);
    CHECK(w == three.sample_weight(-m));
    prev = w;
  }
  CHECK(sample_weight(three, 0.0) == three.sample_weight(0.0));
}

TEST_CASE("nu below one is rejected") {
  CHECK_THROWS_AS(RaoKupper<double>(0.99), ConfigError);
  CHECK_THROWS_AS(RaoKupper<double>(std::nan("")), ConfigError);
}

TEST_CASE("categorize") {
  CHECK(categorize(0.0) == SampleCategory::Boundary);
  CHECK(categorize(2.0) == SampleCategory::Easy);
  CHECK(categorize(1.999) == SampleCategory::Boundary);
  CHECK(categorize(-2.0) == SampleCategory::Hard);
  CHECK(categorize(-1.999) == SampleCategory::Boundary);
  CHECK(categorize(0.5, {0.5, -0.1}) == SampleCategory::Easy);
  CHECK_THROWS_AS(categorize(0.0, {-1.0, -2.0}), ConfigError);
  CHECK(to_string(SampleCategory::Hard) == "hard");
}
