#include <algorithm>
#include <cmath>

#include "rial/data_engine.hpp"
#include "rial/error.hpp"
#include "rial/random.hpp"

namespace rial {

double ClassifierFeatures::evidence(const PromptRecord& prompt, TokenId token) const {
  Rng rng(seed, "judge.evidence",
          static_cast<std::uint64_t>(prompt.id) * static_cast<std::uint64_t>(vocab) + static_cast<std::uint64_t>(token));
  const double truth = prompt.is_hallucination(token) ? -1.0 : 1.0;
  return truth + evidence_noise * rng.normal();
}

Vec ClassifierFeatures::extract(const PromptRecord& prompt, std::span<const TokenId> tokens) const {
  Vec x = Vec::Zero(size());
  if (tokens.empty()) return x;
  const double n = static_cast<double>(tokens.size());
  double in_gt = 0.0, min_ev = 1e300, sum_ev = 0.0, negative = 0.0;
  for (TokenId t : tokens) {
    if (t < 0 || t >= vocab) throw ConfigError("token id outside classifier vocabulary");
    x[t] += 1.0 / n;
    if (std::find(prompt.ground_truth.begin(), prompt.ground_truth.end(), t) != prompt.ground_truth.end()) {
      in_gt += 1.0;
    }
    const double ev = evidence(prompt, t);
    min_ev = std::min(min_ev, ev);
    sum_ev += ev;
    if (ev < 0.0) negative += 1.0;
  }
  x[vocab + 0] = in_gt / n;
  x[vocab + 1] = (n - in_gt) / n;
  x[vocab + 2] = min_ev;
  x[vocab + 3] = sum_ev / n;
  x[vocab + 4] = negative / n;
  x[vocab + 5] = negative;
  x[vocab + 6] = n;
  return x;
}

double LearnedClassifier::probability(const PromptRecord& prompt, std::span<const TokenId> tokens) const {
  return sigmoid(weights.dot(recipe.extract(prompt, tokens)) + bias);
}

// ---------------------------------------------------------------------------

ClassifierTrainSet make_classifier_corpus(const std::vector<PromptRecord>& prompts, const ClassifierFeatures& recipe,
                                          const ClassifierCorpusOptions& options, std::uint64_t seed) {
  if (prompts.empty()) throw ConfigError("prompt list is empty");
  if (options.n_examples < 2) throw ConfigError("need at least two classifier examples");
  if (!(options.validation_fraction > 0.0 && options.validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must lie in (0, 1)");
  }
  const int end = recipe.vocab - 1;
  std::vector<LabeledExample> all;
  all.reserve(static_cast<std::size_t>(options.n_examples));
  for (int i = 0; i < options.n_examples; ++i) {
    Rng rng(seed, "classifier.corpus", static_cast<std::uint64_t>(i));
    const PromptRecord& prompt = prompts[rng.below(prompts.size())];
    std::vector<TokenId> tokens;
    if (i % 2 == 0) {
      for (TokenId t : prompt.ground_truth) {
        if (t != end && rng.bernoulli(0.3)) t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(end)));
        tokens.push_back(t);
      }
    } else {
      const int len = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(options.max_len - 1)));
      for (int t = 0; t < len; ++t) tokens.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(end))));
      tokens.push_back(end);
    }
    const int label = judge(options.labeler, prompt, tokens) >= kHallucinationThreshold ? 1 : 0;
    all.push_back({recipe.extract(prompt, tokens), label});
  }
  Rng split(seed, "classifier.split");
  split.shuffle(all.begin(), all.end());
  const auto n_val = static_cast<std::size_t>(std::lround(options.validation_fraction * static_cast<double>(all.size())));
  ClassifierTrainSet out;
  out.validation.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
  out.train.assign(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());
  return out;
}

double logistic_loss(const Vec& weights, double bias, const std::vector<LabeledExample>& data, Vec* gradient) {
  if (data.empty()) throw ConfigError("empty data set");
  double loss = 0.0;
  Vec grad = Vec::Zero(weights.size() + 1);
  for (const LabeledExample& ex : data) {
    const double z = weights.dot(ex.features) + bias;
    // -[y log s(z) + (1 - y) log s(-z)]
    loss -= ex.label ? log_sigmoid(z) : log_sigmoid(-z);
    if (gradient) {
      const double r = sigmoid(z) - ex.label;
      grad.head(weights.size()) += r * ex.features;
      grad[weights.size()] += r;
    }
  }
  const double n = static_cast<double>(data.size());
  if (gradient) *gradient = grad / n;
  return loss / n;
}

double classifier_accuracy(const Vec& weights, double bias, const std::vector<LabeledExample>& data) {
  if (data.empty()) return 0.0;
  int correct = 0;
  for (const LabeledExample& ex : data) {
    const int predicted = sigmoid(weights.dot(ex.features) + bias) >= kHallucinationThreshold ? 1 : 0;
    correct += predicted == ex.label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

ClassifierTrainResult train_classifier(const ClassifierTrainSet& train_set, const ClassifierFeatures& recipe,
                                       double learning_rate, int epochs) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  const auto& train = train_set.train;
  if (train.empty()) throw ConfigError("classifier training set is empty");
  const auto positives = std::count_if(train.begin(), train.end(), [](const auto& e) { return e.label == 1; });
  if (positives == 0 || positives == static_cast<long>(train.size())) {
    throw ConfigError("classifier training set contains a single class");
  }
  const double prior = static_cast<double>(positives) / static_cast<double>(train.size());

  ClassifierTrainResult out;
  LearnedClassifier& clf = out.classifier;
  clf.recipe = recipe;
  clf.weights = Vec::Zero(recipe.size());
  clf.bias = std::log(prior / (1.0 - prior));

  Vec grad;
  out.loss_per_epoch.push_back(logistic_loss(clf.weights, clf.bias, train));
  for (int e = 0; e < epochs; ++e) {
    logistic_loss(clf.weights, clf.bias, train, &grad);
    clf.weights -= learning_rate * grad.head(clf.weights.size());
    clf.bias -= learning_rate * grad[clf.weights.size()];
    out.loss_per_epoch.push_back(logistic_loss(clf.weights, clf.bias, train));
  }
  const auto& eval = train_set.validation.empty() ? train : train_set.validation;
  clf.validation_accuracy = classifier_accuracy(clf.weights, clf.bias, eval);
  return out;
}

}  // namespace rial
