#pragma once

// Pairwise preference models over implicit rewards: Bradley-Terry and the
// tie-aware Rao-Kupper model, plus the Rao-Kupper sample weight used by the
// weighted DPO loss.

#include <cmath>
#include <stdexcept>
#include <string_view>

#include "rial/error.hpp"
#include "rial/softmax.hpp"

namespace rial {

/// beta * (log pi_theta(y|x) - log pi_ref(y|x))
template <typename Scalar>
Scalar implicit_reward(Scalar policy_logp, Scalar reference_logp, Scalar beta) {
  if (!(beta > Scalar(0))) throw ConfigError("beta must be > 0");
  return beta * (policy_logp - reference_logp);
}

template <typename Scalar>
struct ImplicitRewardMargin {
  Scalar chosen_reward;
  Scalar rejected_reward;
  Scalar margin() const { return chosen_reward - rejected_reward; }
};

template <typename Scalar>
struct PairProbabilities {
  Scalar win;   // y_i preferred
  Scalar lose;  // y_j preferred
  Scalar tie;
};

/// Which reward difference enters the win probability. The classical model
/// has p(i > j) = 1 / (1 + nu * exp(r_j - r_i)); the alternative writes the
/// exponent as (r_i - r_j). Tie probability is identical under both.
enum class WinConvention { Classical, Flipped };

template <typename Scalar = double>
class RaoKupper {
 public:
  explicit RaoKupper(Scalar nu, WinConvention convention = WinConvention::Classical)
      : nu_(nu), convention_(convention) {
    if (!(nu >= Scalar(1))) throw ConfigError("Rao-Kupper nu must be >= 1");
  }

  Scalar nu() const { return nu_; }
  WinConvention convention() const { return convention_; }

  /// Probability of a tie as a function of the reward difference. Evaluated in
  /// terms of exp(-|delta|) so it never overflows and is exactly even in delta.
  Scalar tie_probability(Scalar delta) const {
    using std::abs;
    using std::exp;
    const Scalar e = exp(-abs(delta));
    return (nu_ * nu_ - Scalar(1)) * e / ((e + nu_) * (Scalar(1) + nu_ * e));
  }

  PairProbabilities<Scalar> probabilities(Scalar r_i, Scalar r_j) const {
    using std::abs;
    using std::exp;
    const Scalar delta = r_i - r_j;
    const Scalar e = exp(-abs(delta));
    // favoured = 1 / (1 + nu e^{-|delta|}), disfavoured = e^{-|delta|} / (e^{-|delta|} + nu)
    const Scalar favoured = Scalar(1) / (Scalar(1) + nu_ * e);
    const Scalar disfavoured = e / (e + nu_);
    PairProbabilities<Scalar> p{};
    p.tie = tie_probability(delta);
    const bool i_ahead = (convention_ == WinConvention::Classical) ? delta >= Scalar(0) : delta < Scalar(0);
    p.win = i_ahead ? favoured : disfavoured;
    p.lose = i_ahead ? disfavoured : favoured;
    return p;
  }

  /// p_tie(margin) + 2 / (nu + 1). Equal to 1 everywhere when nu == 1.
  Scalar sample_weight(Scalar margin) const {
    return tie_probability(margin) + Scalar(2) / (nu_ + Scalar(1));
  }

 private:
  Scalar nu_;
  WinConvention convention_;
};

template <typename Scalar>
PairProbabilities<Scalar> rk_probabilities(const RaoKupper<Scalar>& model, Scalar r_i, Scalar r_j) {
  return model.probabilities(r_i, r_j);
}

template <typename Scalar>
Scalar sample_weight(const RaoKupper<Scalar>& model, Scalar margin) {
  return model.sample_weight(margin);
}

/// Bradley-Terry: p(i > j) = sigmoid(r_i - r_j).
template <typename Scalar>
Scalar bradley_terry(Scalar r_i, Scalar r_j) {
  return sigmoid(r_i - r_j);
}

enum class SampleCategory { Easy, Hard, Boundary };

constexpr std::string_view to_string(SampleCategory c) {
  switch (c) {
    case SampleCategory::Easy: return "easy";
    case SampleCategory::Hard: return "hard";
    case SampleCategory::Boundary: return "boundary";
  }
  return "?";
}

struct CategoryThresholds {
  double easy = 2.0;
  double hard = -2.0;
};

/// Easy iff margin >= easy threshold, Hard iff margin <= hard threshold.
inline SampleCategory categorize(double margin, const CategoryThresholds& t = {}) {
  if (!(t.hard < 0.0 && 0.0 < t.easy)) {
    throw ConfigError("category thresholds must satisfy m_hard < 0 < m_easy");
  }
  if (margin >= t.easy) return SampleCategory::Easy;
  if (margin <= t.hard) return SampleCategory::Hard;
  return SampleCategory::Boundary;
}

}  // namespace rial
