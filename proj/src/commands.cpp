#include "rial/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rial/alignment.hpp"
#include "rial/data_engine.hpp"
#include "rial/dynamics.hpp"
#include "rial/error.hpp"
#include "rial/jsonl.hpp"
#include "rial/parallel.hpp"
#include "rial/random.hpp"

namespace rial::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// schemas

std::vector<KeySpec> operator+(std::vector<KeySpec> a, const std::vector<KeySpec>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<KeySpec> common_keys() {
  return {
      {"out_dir", "out", "output directory; every file the command writes goes here"},
      {"seed", "0", "run seed; all random streams derive from it"},
      {"workers", "1", "parallel workers (never changes outputs)", false, false},
  };
}

std::vector<KeySpec> policy_keys() {
  return {
      {"policy", "", "initial policy checkpoint; a seeded random policy when empty"},
      {"vocab", "", "vocabulary size; inferred from the prompts when empty"},
      {"dim", "64", "feature dimension of a fresh policy"},
      {"window", "2", "feature window (tokens) of a fresh policy"},
      {"init_scale", "1.0", "std-dev of a fresh policy's read-out weights"},
      {"max_len", "6", "maximum response length in tokens"},
  };
}

std::vector<KeySpec> judge_keys() {
  return {
      {"judge", "oracle", "hallucination judge: oracle | classifier"},
      {"classifier", "", "classifier file written by train-classifier (judge = classifier)"},
      {"judge_noise", "0", "oracle label flip probability"},
      {"judge_soft_delta", "0", "oracle soft score delta (scores delta / 1 - delta)"},
      {"tau", "0.5", "hallucination threshold"},
  };
}

std::vector<KeySpec> gen_task_schema() {
  return common_keys() + std::vector<KeySpec>{
                             {"vocab", "", "vocabulary size including the end token", true},
                             {"n", "64", "number of prompts"},
                             {"halluc_fraction", "0.25", "fraction of the vocabulary in each hallucination set"},
                             {"max_len", "6", "maximum ground-truth length including the end token"},
                         };
}

std::vector<KeySpec> train_classifier_schema() {
  return common_keys() + std::vector<KeySpec>{
                             {"prompts", "", "prompts.jsonl", true},
                             {"vocab", "", "vocabulary size; inferred from the prompts when empty"},
                             {"n_examples", "2000", "synthetic oracle-labelled examples"},
                             {"validation_fraction", "0.2", "held-out fraction"},
                             {"classifier_lr", "2.0", "gradient-descent step size"},
                             {"classifier_epochs", "300", "full-batch epochs"},
                             {"evidence_noise", "0.5", "noise of the per-token content evidence"},
                             {"judge_noise", "0", "label noise of the oracle annotator"},
                             {"max_len", "6", "maximum response length"},
                         };
}

std::vector<KeySpec> rollout_schema() {
  return common_keys() + policy_keys() +
         std::vector<KeySpec>{
             {"prompts", "", "prompts.jsonl", true},
             {"k", "5", "responses per prompt"},
             {"temperature", "1.0", "sampling temperature"},
         };
}

std::vector<KeySpec> annotate_schema() {
  return common_keys() + judge_keys() +
         std::vector<KeySpec>{
             {"prompts", "", "prompts.jsonl", true},
             {"rollouts", "", "rollouts.jsonl", true},
         };
}

std::vector<KeySpec> select_schema() {
  return common_keys() + std::vector<KeySpec>{
                             {"rollouts", "", "rollouts.jsonl", true},
                             {"annotations", "", "annotations.jsonl", true},
                             {"tau", "0.5", "hallucination threshold"},
                         };
}

std::vector<KeySpec> align_schema() {
  return common_keys() + policy_keys() + judge_keys() +
         std::vector<KeySpec>{
             {"prompts", "", "prompts.jsonl", true},
             {"eval_prompts", "", "prompts used for the hallucination rate; training prompts when empty"},
             {"recipe", "none", "none | paper (two iterations: off-policy beta 0.5 + NLL 0.2, then weighted on-policy)"},
             {"iterations", "1", "number of iterations (recipe none)"},
             {"k", "5", "generations per prompt"},
             {"temperature", "1.0", "sampling temperature"},
             {"beta", "0.1", "DPO coefficient"},
             {"nu", "3.0", "Rao-Kupper tie parameter (1 = plain DPO weights)"},
             {"learning_rate", "10", "gradient step size"},
             {"epochs", "5", "epochs per iteration"},
             {"batch_size", "32", "mini-batch size"},
             {"nll_weight", "0", "weight of the chosen-response NLL regularizer"},
             {"loss", "weighted", "dpo | weighted"},
             {"source", "onpolicy", "onpolicy | offpolicy"},
             {"weight_mode", "per-step", "per-step | per-epoch sample-weight refresh"},
             {"optimizer", "sgd", "sgd | adam"},
             {"m_easy", "2.0", "margin at or above which a pair is easy"},
             {"m_hard", "-2.0", "margin at or below which a pair is hard"},
             {"offpolicy_retries", "3", "extra sampling rounds when no hallucinated rejected sample is found"},
             {"nu_sweep", "", "comma-separated nu values; runs one alignment per value"},
             {"win_convention", "classical", "classical | flipped (win/lose columns of weight_curves.csv)"},
         };
}

std::vector<KeySpec> dynamics_schema() {
  return common_keys() + std::vector<KeySpec>{
                             {"mode", "offpolicy", "offpolicy | onpolicy-contrast | support-probe"},
                             {"n_seeds", "1000", "offpolicy: number of random trajectories"},
                             {"vocab_sizes", "5,10,50", "offpolicy: vocabulary sizes, cycled over seeds"},
                             {"steps", "", "steps per run (offpolicy 200, onpolicy-contrast 500, support-probe 200)"},
                             {"step", "0.05", "offpolicy: Euler step dt * beta"},
                             {"route", "euler", "offpolicy: euler | weight"},
                             {"dump_trajectories", "3", "offpolicy: per-step CSVs for the first N seeds"},
                             {"beta", "0.1", "contrast / probe: DPO coefficient"},
                             {"learning_rate", "", "contrast / probe: step size (0.1 / 0.5)"},
                             {"ceiling", "1e-3", "support-probe: negligible-probability ceiling"},
                         };
}

std::vector<KeySpec> report_schema() {
  return common_keys() + std::vector<KeySpec>{
                             {"annotations", "", "annotations.jsonl", true},
                             {"pairs", "", "pairs.jsonl", true},
                             {"iterations_csv", "", "iterations.csv from align (optional)"},
                             {"histogram_csv", "", "weight_histogram.csv from align (optional)"},
                         };
}

// ---------------------------------------------------------------------------
// helpers

fs::path out_dir(const RunConfig& cfg) {
  fs::path dir = cfg.str("out_dir");
  fs::create_directories(dir);
  return dir;
}

void write_resolved(const RunConfig& cfg, const std::string& command) {
  jsonl::write_file(out_dir(cfg) / (command + ".resolved.conf"), cfg.resolved_text());
}

int workers(const RunConfig& cfg) {
  const auto w = cfg.integer("workers");
  if (w < 1) throw ConfigError("--workers must be >= 1");
  return static_cast<int>(w);
}

int positive_int(const RunConfig& cfg, const std::string& key, long long min = 1) {
  const auto v = cfg.integer(key);
  if (v < min) throw ConfigError(flag_name(key) + " must be >= " + std::to_string(min));
  return static_cast<int>(v);
}

std::vector<PromptRecord> load_prompts(const RunConfig& cfg, const std::string& key = "prompts") {
  auto prompts = jsonl::read_prompts(jsonl::read_file(cfg.str(key)));
  if (prompts.empty()) throw ConfigError(cfg.str(key) + " contains no prompts");
  return prompts;
}

int infer_vocab(const RunConfig& cfg, const std::vector<PromptRecord>& prompts) {
  if (cfg.has("vocab")) return positive_int(cfg, "vocab", 3);
  TokenId max_token = 0;
  for (const auto& p : prompts) {
    for (TokenId t : p.ground_truth) max_token = std::max(max_token, t);
    for (TokenId t : p.halluc_set) max_token = std::max(max_token, t);
  }
  return max_token + 1;
}

Policy initial_policy(const RunConfig& cfg, int vocab) {
  if (cfg.has("policy")) {
    Policy p = load_checkpoint(cfg.str("policy"));
    if (p.vocab() != vocab) throw ConfigError("policy checkpoint vocabulary does not match the prompts");
    return p;
  }
  const std::uint64_t seed = cfg.u64("seed");
  FeatureMap fmap(derive_seed(seed, "features"), positive_int(cfg, "dim"), vocab,
                  positive_int(cfg, "window", 0));
  return Policy::random(std::move(fmap), cfg.real("init_scale"), derive_seed(seed, "policy"));
}

HallucinationJudge make_judge(const RunConfig& cfg) {
  const std::string kind = cfg.str("judge");
  if (kind == "oracle") {
    OracleJudge o;
    o.noise = cfg.real("judge_noise");
    o.soft_delta = cfg.real("judge_soft_delta");
    o.seed = derive_seed(cfg.u64("seed"), "judge");
    if (!(o.noise >= 0.0 && o.noise < 0.5)) throw ConfigError("--judge-noise must lie in [0, 0.5)");
    if (!(o.soft_delta >= 0.0 && o.soft_delta < 0.5)) throw ConfigError("--judge-soft-delta must lie in [0, 0.5)");
    return o;
  }
  if (kind == "classifier") return jsonl::read_classifier(jsonl::read_file(cfg.str("classifier")));
  throw ConfigError("--judge must be oracle or classifier, got '" + kind + "'");
}

double tau_of(const RunConfig& cfg) {
  const double tau = cfg.real("tau");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("--tau must lie in (0, 1)");
  return tau;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

template <class E>
E parse_enum(const RunConfig& cfg, const std::string& key, const std::vector<std::pair<std::string, E>>& options) {
  const std::string& v = cfg.str(key);
  for (const auto& [name, value] : options) {
    if (name == v) return value;
  }
  std::string allowed;
  for (const auto& o : options) allowed += (allowed.empty() ? "" : " | ") + o.first;
  throw ConfigError(flag_name(key) + " must be one of " + allowed + ", got '" + v + "'");
}

}  // namespace

// ---------------------------------------------------------------------------

int cmd_gen_task(const RunConfig& cfg, std::ostream& log) {
  TaskOptions opts;
  opts.max_len = positive_int(cfg, "max_len", 2);
  const auto prompts = generate_task(cfg.u64("seed"), positive_int(cfg, "n"), positive_int(cfg, "vocab", 3),
                                     cfg.real("halluc_fraction"), opts);
  const fs::path dir = out_dir(cfg);
  jsonl::write_file(dir / "prompts.jsonl", jsonl::write_prompts(prompts));
  write_resolved(cfg, "gen-task");
  log << "gen-task: wrote " << prompts.size() << " prompts to " << (dir / "prompts.jsonl").string() << '\n';
  return kOk;
}

int cmd_train_classifier(const RunConfig& cfg, std::ostream& log) {
  const auto prompts = load_prompts(cfg);
  const std::uint64_t seed = cfg.u64("seed");
  ClassifierFeatures recipe;
  recipe.vocab = infer_vocab(cfg, prompts);
  recipe.evidence_noise = cfg.real("evidence_noise");
  recipe.seed = derive_seed(seed, "classifier.features");
  ClassifierCorpusOptions copts;
  copts.n_examples = positive_int(cfg, "n_examples", 2);
  copts.validation_fraction = cfg.real("validation_fraction");
  copts.max_len = positive_int(cfg, "max_len", 2);
  copts.labeler.noise = cfg.real("judge_noise");
  copts.labeler.seed = derive_seed(seed, "classifier.labels");
  const auto corpus = make_classifier_corpus(prompts, recipe, copts, derive_seed(seed, "classifier.corpus"));
  const auto result =
      train_classifier(corpus, recipe, cfg.real("classifier_lr"), positive_int(cfg, "classifier_epochs", 0));

  const fs::path dir = out_dir(cfg);
  jsonl::write_file(dir / "classifier.json", jsonl::write_classifier(result.classifier));
  std::ostringstream curve;
  curve << "epoch,train_loss\n";
  for (std::size_t e = 0; e < result.loss_per_epoch.size(); ++e) curve << e << ',' << fmt(result.loss_per_epoch[e]) << '\n';
  jsonl::write_file(dir / "classifier_loss.csv", curve.str());
  write_resolved(cfg, "train-classifier");
  log << "train-classifier: validation accuracy " << result.classifier.validation_accuracy << " on "
      << corpus.validation.size() << " held-out examples\n";
  return kOk;
}

int cmd_rollout(const RunConfig& cfg, std::ostream& log) {
  const auto prompts = load_prompts(cfg);
  const Policy policy = initial_policy(cfg, infer_vocab(cfg, prompts));
  SamplingOptions sampling;
  sampling.temperature = cfg.real("temperature");
  sampling.max_len = positive_int(cfg, "max_len");
  const int k = positive_int(cfg, "k");
  const auto seed = derive_seed(cfg.u64("seed"), "cli.rollout");

  std::vector<std::vector<Response>> per_prompt(prompts.size());
  parallel_for(prompts.size(), workers(cfg), [&](std::size_t i) {
    per_prompt[i] = rollout_prompt(policy, prompts[i].id, k, sampling, seed);
  });
  std::vector<jsonl::RolloutLine> lines;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (int j = 0; j < k; ++j) {
      const Response& r = per_prompt[i][static_cast<std::size_t>(j)];
      lines.push_back({prompts[i].id, j, r.tokens, r.log_prob});
    }
  }
  const fs::path dir = out_dir(cfg);
  jsonl::write_file(dir / "rollouts.jsonl", jsonl::write_rollouts(lines));
  save_checkpoint(policy, dir / "policy.ckpt");
  write_resolved(cfg, "rollout");
  log << "rollout: " << lines.size() << " responses for " << prompts.size() << " prompts\n";
  return kOk;
}

int cmd_annotate(const RunConfig& cfg, std::ostream& log) {
  const auto prompts = load_prompts(cfg);
  const auto rollouts = jsonl::read_rollouts(jsonl::read_file(cfg.str("rollouts")));
  const HallucinationJudge j = make_judge(cfg);
  const double tau = tau_of(cfg);
  std::map<PromptId, const PromptRecord*> by_id;
  for (const auto& p : prompts) by_id[p.id] = &p;

  std::vector<jsonl::AnnotationLine> lines(rollouts.size());
  for (const auto& r : rollouts) {
    if (!by_id.count(r.prompt_id)) throw ConfigError("rollout refers to unknown prompt " + std::to_string(r.prompt_id));
  }
  parallel_for(rollouts.size(), workers(cfg), [&](std::size_t i) {
    const auto& r = rollouts[i];
    const double p = judge(j, *by_id.at(r.prompt_id), r.tokens);
    lines[i] = {r.prompt_id, r.response_id, p, p >= tau ? 1 : 0};
  });
  const fs::path dir = out_dir(cfg);
  jsonl::write_file(dir / "annotations.jsonl", jsonl::write_annotations(lines));
  write_resolved(cfg, "annotate");
  const auto positives = std::count_if(lines.begin(), lines.end(), [](const auto& l) { return l.label == 1; });
  log << "annotate: " << positives << " of " << lines.size() << " responses labelled hallucinated\n";
  return kOk;
}

int cmd_select(const RunConfig& cfg, std::ostream& log) {
  const auto rollouts = jsonl::read_rollouts(jsonl::read_file(cfg.str("rollouts")));
  const auto annotations = jsonl::read_annotations(jsonl::read_file(cfg.str("annotations")));
  const double tau = cfg.real("tau");
  std::map<std::pair<PromptId, int>, double> score;
  for (const auto& a : annotations) score[{a.prompt_id, a.response_id}] = a.p_halluc;

  // group by prompt, preserving first-appearance order and response order
  std::vector<PromptId> order;
  std::map<PromptId, RolloutSet> sets;
  for (const auto& r : rollouts) {
    const auto it = score.find({r.prompt_id, r.response_id});
    if (it == score.end()) {
      throw ConfigError("no annotation for prompt " + std::to_string(r.prompt_id) + " response " +
                        std::to_string(r.response_id));
    }
    if (!sets.count(r.prompt_id)) order.push_back(r.prompt_id);
    RolloutSet& s = sets[r.prompt_id];
    s.prompt = r.prompt_id;
    s.responses.push_back({r.tokens, r.log_prob});
    s.p_halluc.push_back(it->second);
  }
  std::vector<jsonl::PairLine> pairs;
  FilterStats stats;
  for (PromptId id : order) {
    const Selection sel = select_pair(sets.at(id), tau);
    if (const auto* pair = std::get_if<PreferencePair>(&sel)) {
      pairs.push_back(jsonl::to_line(*pair));
      ++stats.admitted;
    } else if (std::get<Filtered>(sel).reason == FilterReason::AllClean) {
      ++stats.filtered_all_clean;
    } else {
      ++stats.filtered_all_halluc;
    }
  }
  const fs::path dir = out_dir(cfg);
  jsonl::write_file(dir / "pairs.jsonl", jsonl::write_pairs(pairs));
  std::ostringstream s;
  s << "admitted,filtered_all_clean,filtered_all_halluc\n"
    << stats.admitted << ',' << stats.filtered_all_clean << ',' << stats.filtered_all_halluc << '\n';
  jsonl::write_file(dir / "select_stats.csv", s.str());
  write_resolved(cfg, "select");
  log << "select: admitted " << stats.admitted << ", all-clean " << stats.filtered_all_clean << ", all-hallucinated "
      << stats.filtered_all_halluc << '\n';
  return pairs.empty() ? kEmptyDataset : kOk;
}

namespace {

TrainingConfig training_config(const RunConfig& cfg) {
  TrainingConfig tc;
  StageConfig& s = tc.stage;
  s.source = parse_enum<PairSource>(cfg, "source", {{"onpolicy", PairSource::OnPolicy}, {"offpolicy", PairSource::OffPolicy}});
  s.loss = parse_enum<LossKind>(cfg, "loss", {{"dpo", LossKind::Dpo}, {"weighted", LossKind::Weighted}});
  s.beta = cfg.real("beta");
  s.nu = cfg.real("nu");
  s.learning_rate = cfg.real("learning_rate");
  s.epochs = positive_int(cfg, "epochs");
  s.batch_size = positive_int(cfg, "batch_size");
  s.nll_weight = cfg.real("nll_weight");
  tc.iterations = positive_int(cfg, "iterations");
  tc.k = positive_int(cfg, "k", 2);
  tc.tau = tau_of(cfg);
  tc.sampling.temperature = cfg.real("temperature");
  tc.sampling.max_len = positive_int(cfg, "max_len");
  tc.weight_mode = parse_enum<WeightMode>(cfg, "weight_mode", {{"per-step", WeightMode::PerStep}, {"per-epoch", WeightMode::PerEpoch}});
  tc.optimizer = parse_enum<OptimizerKind>(cfg, "optimizer", {{"sgd", OptimizerKind::Sgd}, {"adam", OptimizerKind::Adam}});
  tc.thresholds.easy = cfg.real("m_easy");
  tc.thresholds.hard = cfg.real("m_hard");
  tc.seed = cfg.u64("seed");
  tc.workers = workers(cfg);
  tc.offpolicy_retries = positive_int(cfg, "offpolicy_retries", 0);
  const std::string recipe = cfg.str("recipe");
  if (recipe == "paper") {
    tc = paper_recipe(tc);
  } else if (recipe != "none") {
    throw ConfigError("--recipe must be none or paper, got '" + recipe + "'");
  }
  tc.validate();
  return tc;
}

std::string weight_curves_csv(const std::vector<double>& nus, WinConvention convention) {
  std::ostringstream out;
  out << "nu,margin,p_win,p_lose,p_tie,weight\n";
  for (double nu : nus) {
    const RaoKupper<double> rk(nu, convention);
    for (int i = -100; i <= 100; ++i) {
      const double m = i / 10.0;
      const auto p = rk.probabilities(m, 0.0);
      out << fmt(nu) << ',' << fmt(m) << ',' << fmt(p.win) << ',' << fmt(p.lose) << ',' << fmt(p.tie) << ','
          << fmt(rk.sample_weight(m)) << '\n';
    }
  }
  return out.str();
}

struct AlignOutcome {
  TrainingReport report;
  bool any_empty = false;
};

AlignOutcome align_once(const TrainingConfig& tc, const std::vector<PromptRecord>& prompts,
                        const std::vector<PromptRecord>* eval, const HallucinationJudge& j, const Policy& initial,
                        const fs::path& dir, std::ostream& log) {
  fs::create_directories(dir);
  const AlignmentResult result = run_iterative_alignment(tc, prompts, j, initial, eval);
  save_checkpoint(initial, dir / "policy_init.ckpt");
  for (std::size_t t = 0; t < result.iterates.size(); ++t) {
    save_checkpoint(result.iterates[t], dir / ("policy_iter" + std::to_string(t + 1) + ".ckpt"));
  }
  save_checkpoint(result.policy, dir / "policy_final.ckpt");
  jsonl::write_file(dir / "report.csv", epochs_csv(result.report));
  jsonl::write_file(dir / "iterations.csv", iterations_csv(result.report));
  jsonl::write_file(dir / "weight_histogram.csv", weight_histogram_csv(result.report));
  log << "align: greedy hallucination rate " << result.report.initial_halluc_rate;
  for (const auto& it : result.report.iterations) {
    log << " -> " << it.halluc_rate_after << (it.status == IterationStatus::Ok ? "" : " (empty preference set)");
  }
  log << '\n';
  return {result.report, result.report.any_empty()};
}

}  // namespace

int cmd_align(const RunConfig& cfg, std::ostream& log) {
  const auto prompts = load_prompts(cfg);
  std::vector<PromptRecord> eval;
  if (cfg.has("eval_prompts")) eval = load_prompts(cfg, "eval_prompts");
  const TrainingConfig tc = training_config(cfg);
  const Policy initial = initial_policy(cfg, infer_vocab(cfg, prompts));
  const HallucinationJudge j = make_judge(cfg);
  const auto* eval_ptr = eval.empty() ? nullptr : &eval;
  const WinConvention convention =
      parse_enum<WinConvention>(cfg, "win_convention", {{"classical", WinConvention::Classical}, {"flipped", WinConvention::Flipped}});
  const fs::path dir = out_dir(cfg);

  bool any_empty = false;
  if (cfg.has("nu_sweep")) {
    const auto nus = cfg.real_list("nu_sweep");
    if (nus.empty()) throw ConfigError("--nu-sweep is empty");
    std::ostringstream sweep;
    sweep << "nu,initial_halluc_rate,final_halluc_rate,final_mean_weight\n";
    for (double nu : nus) {
      if (!(nu >= 1.0)) throw ConfigError("--nu-sweep values must be >= 1");
      TrainingConfig run = tc;
      run.stage.nu = nu;
      for (auto& s : run.schedule) {
        if (s.loss == LossKind::Weighted) s.nu = nu;
      }
      log << "nu = " << nu << ": ";
      const auto outcome = align_once(run, prompts, eval_ptr, j, initial, dir / ("nu_" + fmt(nu)), log);
      any_empty = any_empty || outcome.any_empty;
      const auto& r = outcome.report;
      const double final_rate = r.iterations.empty() ? r.initial_halluc_rate : r.iterations.back().halluc_rate_after;
      const double final_weight = r.epochs.empty() ? 0.0 : r.epochs.back().mean_weight;
      sweep << fmt(nu) << ',' << fmt(r.initial_halluc_rate) << ',' << fmt(final_rate) << ',' << fmt(final_weight) << '\n';
    }
    jsonl::write_file(dir / "nu_sweep.csv", sweep.str());
    jsonl::write_file(dir / "weight_curves.csv", weight_curves_csv(nus, convention));
  } else {
    any_empty = align_once(tc, prompts, eval_ptr, j, initial, dir, log).any_empty;
    std::vector<double> nus;
    for (int t = 1; t <= tc.total_iterations(); ++t) nus.push_back(tc.stage_for(t).nu);
    std::sort(nus.begin(), nus.end());
    nus.erase(std::unique(nus.begin(), nus.end()), nus.end());
    jsonl::write_file(dir / "weight_curves.csv", weight_curves_csv(nus, convention));
  }
  write_resolved(cfg, "align");
  if (any_empty) {
    log << "align: an iteration ended with an empty preference set\n";
    return kEmptyDataset;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

namespace {

json distribution_json(const Vec& p) { return std::vector<double>(p.data(), p.data() + p.size()); }

// Documented Figure-1 style setup: modal hallucinated token 0 at 0.5, best
// corrective 1 at 0.2, off-policy ground-truth token 9 at 0.01.
Vec contrast_distribution() {
  Vec p(10);
  p << 0.50, 0.20, 0.08, 0.06, 0.03, 0.03, 0.03, 0.03, 0.03, 0.01;
  return p;
}

// Support probe reference: token 9 is far outside the support (2e-7), token 6
// sits inside it (1e-2).
Vec probe_distribution() {
  Vec p(10);
  p << 0.6, 0.15, 0.1, 0.07, 0.04, 0.02, 0.01, 0.0099998, 0.0001, 0.0000002;
  return p / p.sum();
}

}  // namespace

int cmd_dynamics(const RunConfig& cfg, std::ostream& log) {
  const std::string mode = cfg.str("mode");
  const std::uint64_t seed = cfg.u64("seed");
  if (mode != "offpolicy" && mode != "onpolicy-contrast" && mode != "support-probe") {
    throw ConfigError("--mode must be offpolicy, onpolicy-contrast or support-probe, got '" + mode + "'");
  }
  const fs::path dir = out_dir(cfg);
  std::string summary;

  if (mode == "offpolicy") {
    const int steps = cfg.has("steps") ? positive_int(cfg, "steps", 0) : 200;
    const int n_seeds = positive_int(cfg, "n_seeds");
    const auto vocab_sizes = cfg.int_list("vocab_sizes");
    if (vocab_sizes.empty()) throw ConfigError("--vocab-sizes is empty");
    const double step = cfg.real("step");
    const std::string route = cfg.str("route");
    if (route != "euler" && route != "weight") throw ConfigError("--route must be euler or weight");
    const auto dump = cfg.integer("dump_trajectories");

    RemarkSuiteSummary total;
    for (int i = 0; i < n_seeds; ++i) {
      const int vocab = vocab_sizes[static_cast<std::size_t>(i) % vocab_sizes.size()];
      auto setup = random_offpolicy_setup(derive_seed(seed, "remark", static_cast<std::uint64_t>(i)), vocab, steps, step);
      setup.config.mode = route == "euler" ? DynamicsMode::EulerProbability : DynamicsMode::WeightSpace;
      const TrajectoryRun run = run_offpolicy_trajectory(setup.config, setup.target);
      if (i < dump) jsonl::write_file(dir / ("trajectory_" + std::to_string(i) + ".csv"), trajectory_csv(run));
      json line;
      line["seed"] = i;
      line["vocab"] = vocab;
      line["hallucinated"] = run.records.front().hallucinated;
      line["target"] = setup.target;
      line["gap_increase_violations"] = run.gap_increase_violations;
      line["gap_decrease_violations"] = run.gap_decrease_violations;
      line["g_bound_violations"] = run.g_bound_violations;
      line["ordering_violations"] = run.ordering_violations;
      line["final"] = distribution_json(run.records.back().dist.probs);
      summary += line.dump() + "\n";
      ++total.runs;
      total.checks += run.checks;
      total.gap_increase_violations += run.gap_increase_violations;
      total.gap_decrease_violations += run.gap_decrease_violations;
      total.g_bound_violations += run.g_bound_violations;
      total.ordering_violations += run.ordering_violations;
      total.max_sum_drift = std::max(total.max_sum_drift, run.max_sum_drift);
    }
    json totals;
    totals["runs"] = total.runs;
    totals["checks"] = total.checks;
    totals["gap_increase_violations"] = total.gap_increase_violations;
    totals["gap_decrease_violations"] = total.gap_decrease_violations;
    totals["g_bound_violations"] = total.g_bound_violations;
    totals["ordering_violations"] = total.ordering_violations;
    totals["max_sum_drift"] = total.max_sum_drift;
    jsonl::write_file(dir / "totals.json", totals.dump(2) + "\n");
    log << "dynamics offpolicy: " << total.runs << " runs, " << total.gap_increase_violations
        << " non-decreasing-gap violations, " << total.ordering_violations << " ordering violations, "
        << total.g_bound_violations << " bound violations\n";
  } else if (mode == "onpolicy-contrast") {
    const int steps = cfg.has("steps") ? positive_int(cfg, "steps", 0) : 500;
    ContrastConfig cc;
    cc.halluc_set = {0, 2, 3};
    cc.offpolicy_target = 9;
    cc.beta = cfg.real("beta");
    cc.learning_rate = cfg.has("learning_rate") ? cfg.real("learning_rate") : 0.1;
    cc.seed = seed;
    const Policy policy = policy_with_distribution(contrast_distribution(), derive_seed(seed, "contrast.features"));
    const auto on = run_onpolicy_contrast(cc, policy, OracleJudge{}, steps);
    const auto off = run_offpolicy_contrast(cc, policy, steps);
    jsonl::write_file(dir / "onpolicy.csv", distribution_trajectory_csv(on.trajectory));
    jsonl::write_file(dir / "offpolicy.csv", distribution_trajectory_csv(off.trajectory));
    for (const auto* r : {&on, &off}) {
      json line;
      line["arm"] = r == &on ? "onpolicy" : "offpolicy";
      line["seed"] = seed;
      line["flip"] = r->flipped;
      line["flip_step"] = r->flip_step;
      line["steps_run"] = r->steps_run;
      line["sampling_exhausted"] = r->sampling_exhausted;
      line["before"] = distribution_json(r->before.probs);
      line["after"] = distribution_json(r->after.probs);
      summary += line.dump() + "\n";
    }
    log << "dynamics onpolicy-contrast: on-policy flip=" << on.flipped << " (step " << on.flip_step
        << "), off-policy flip=" << off.flipped << '\n';
  } else {
    SupportProbeConfig pc;
    pc.steps = cfg.has("steps") ? positive_int(cfg, "steps", 0) : 200;
    pc.beta = cfg.real("beta");
    pc.learning_rate = cfg.has("learning_rate") ? cfg.real("learning_rate") : 0.5;
    pc.ceiling = cfg.real("ceiling");
    const Policy reference = policy_with_distribution(probe_distribution(), derive_seed(seed, "probe.features"));
    const std::vector<PreferencePair> pairs{support_pair(reference, 0, {9}), support_pair(reference, 0, {6})};
    const auto result = support_suppression_probe(reference, pairs, pc);
    std::ostringstream csv;
    csv << "arm,token,reference_prob,final_prob,growth\n";
    const char* arms[] = {"low-support", "in-support"};
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& e = result.entries[i];
      csv << arms[i] << ',' << pairs[i].chosen.tokens[0] << ',' << fmt(e.reference_prob) << ',' << fmt(e.final_prob)
          << ',' << fmt(e.final_prob / e.reference_prob) << '\n';
      json line;
      line["arm"] = arms[i];
      line["reference_prob"] = e.reference_prob;
      line["final_prob"] = e.final_prob;
      line["below_ceiling"] = e.final_prob < pc.ceiling;
      summary += line.dump() + "\n";
    }
    jsonl::write_file(dir / "probe.csv", csv.str());
    log << "dynamics support-probe: low-support " << result.entries[0].reference_prob << " -> "
        << result.entries[0].final_prob << ", in-support " << result.entries[1].reference_prob << " -> "
        << result.entries[1].final_prob << '\n';
  }
  jsonl::write_file(dir / "summary.jsonl", summary);
  write_resolved(cfg, "dynamics");
  return kOk;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::map<std::string, std::string>> read_csv(const std::string& text) {
  std::vector<std::map<std::string, std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> header;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream s(l);
    while (std::getline(s, cell, ',')) out.push_back(cell);
    return out;
  };
  if (!std::getline(in, line)) return rows;
  header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw ConfigError("malformed CSV row: " + line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

const std::string& cell(const std::map<std::string, std::string>& row, const std::string& col) {
  const auto it = row.find(col);
  if (it == row.end()) throw ConfigError("CSV is missing column '" + col + "'");
  return it->second;
}

}  // namespace

int cmd_report(const RunConfig& cfg, std::ostream& log) {
  const auto annotations = jsonl::read_annotations(jsonl::read_file(cfg.str("annotations")));
  const auto pairs = jsonl::read_pairs(jsonl::read_file(cfg.str("pairs")));
  const fs::path dir = out_dir(cfg);

  std::map<PromptId, std::pair<int, int>> per_prompt;  // responses, hallucinated
  std::set<PromptId> admitted;
  for (const auto& p : pairs) admitted.insert(p.prompt_id);
  int hallucinated = 0;
  for (const auto& a : annotations) {
    auto& c = per_prompt[a.prompt_id];
    ++c.first;
    c.second += a.label;
    hallucinated += a.label;
  }

  std::ostringstream summary;
  summary << "n_prompts,n_responses,n_hallucinated,halluc_rate,n_pairs,mean_p_chosen,mean_p_rejected\n";
  double pc = 0.0, pr = 0.0;
  for (const auto& p : pairs) {
    pc += p.p_chosen;
    pr += p.p_rejected;
  }
  const double n_pairs = static_cast<double>(pairs.size());
  const double rate = annotations.empty() ? 0.0 : static_cast<double>(hallucinated) / static_cast<double>(annotations.size());
  summary << per_prompt.size() << ',' << annotations.size() << ',' << hallucinated << ',' << fmt(rate) << ','
          << pairs.size() << ',' << fmt(pairs.empty() ? 0.0 : pc / n_pairs) << ','
          << fmt(pairs.empty() ? 0.0 : pr / n_pairs) << '\n';
  jsonl::write_file(dir / "summary.csv", summary.str());

  std::ostringstream prompts_csv;
  prompts_csv << "prompt_id,n_responses,n_hallucinated,halluc_rate,admitted\n";
  for (const auto& [id, c] : per_prompt) {
    prompts_csv << id << ',' << c.first << ',' << c.second << ','
                << fmt(static_cast<double>(c.second) / static_cast<double>(c.first)) << ',' << (admitted.count(id) ? 1 : 0)
                << '\n';
  }
  jsonl::write_file(dir / "prompts_report.csv", prompts_csv.str());

  std::ostringstream pairs_csv;
  pairs_csv << "prompt_id,chosen_len,rejected_len,p_chosen,p_rejected\n";
  for (const auto& p : pairs) {
    pairs_csv << p.prompt_id << ',' << p.chosen.size() << ',' << p.rejected.size() << ',' << fmt(p.p_chosen) << ','
              << fmt(p.p_rejected) << '\n';
  }
  jsonl::write_file(dir / "pairs_report.csv", pairs_csv.str());
  if (pairs.empty()) log << "warning: pairs file is empty; pairs_report.csv has no rows\n";

  if (cfg.has("iterations_csv")) {
    std::ostringstream out;
    out << "iteration,halluc_rate_before,halluc_rate_after,admitted\n";
    for (const auto& row : read_csv(jsonl::read_file(cfg.str("iterations_csv")))) {
      out << cell(row, "iteration") << ',' << cell(row, "halluc_rate_before") << ',' << cell(row, "halluc_rate_after")
          << ',' << cell(row, "admitted") << '\n';
    }
    jsonl::write_file(dir / "iterations_report.csv", out.str());
  }
  if (cfg.has("histogram_csv")) {
    // counts summed over epochs, per iteration
    std::map<std::pair<int, std::string>, long> counts;
    std::map<std::string, std::string> bin_hi;
    for (const auto& row : read_csv(jsonl::read_file(cfg.str("histogram_csv")))) {
      counts[{std::stoi(cell(row, "iteration")), cell(row, "bin_lo")}] += std::stol(cell(row, "count"));
      bin_hi[cell(row, "bin_lo")] = cell(row, "bin_hi");
    }
    std::ostringstream out;
    out << "iteration,bin_lo,bin_hi,count\n";
    for (const auto& [key, count] : counts) {
      out << key.first << ',' << key.second << ',' << bin_hi[key.second] << ',' << count << '\n';
    }
    jsonl::write_file(dir / "weight_histogram_report.csv", out.str());
  }
  write_resolved(cfg, "report");
  log << "report: hallucination rate " << rate << " over " << annotations.size() << " responses, " << pairs.size()
      << " pairs\n";
  return kOk;
}

// ---------------------------------------------------------------------------

const std::vector<Command>& commands() {
  static const std::vector<Command> list = {
      {"gen-task", "generate a synthetic prompt set", gen_task_schema, cmd_gen_task},
      {"train-classifier", "train the logistic hallucination classifier", train_classifier_schema, cmd_train_classifier},
      {"rollout", "sample K responses per prompt", rollout_schema, cmd_rollout},
      {"annotate", "judge rollouts", annotate_schema, cmd_annotate},
      {"select", "build chosen/rejected pairs from annotated rollouts", select_schema, cmd_select},
      {"align", "run iterative (weighted) DPO alignment", align_schema, cmd_align},
      {"dynamics", "training-dynamics experiments", dynamics_schema, cmd_dynamics},
      {"report", "aggregate pipeline artifacts into CSV", report_schema, cmd_report},
  };
  return list;
}

int run_cli(int argc, const char* const* argv, std::ostream& log) {
  CLI::App app{"rial: on-policy hallucination-aware preference alignment lab"};
  app.require_subcommand(1);
  struct Bound {
    const Command* command;
    CLI::App* sub;
    std::string config_file;
    std::vector<std::pair<std::string, std::unique_ptr<std::string>>> values;
  };
  std::vector<std::unique_ptr<Bound>> bound;
  for (const Command& c : commands()) {
    auto b = std::make_unique<Bound>();
    b->command = &c;
    b->sub = app.add_subcommand(c.name, c.description);
    b->sub->add_option("--config", b->config_file, "key = value configuration file");
    for (const KeySpec& k : c.schema()) {
      auto storage = std::make_unique<std::string>();
      std::string help = k.help;
      if (!k.default_value.empty()) help += " [default: " + k.default_value + "]";
      b->sub->add_option(flag_name(k.name), *storage, help);
      b->values.emplace_back(k.name, std::move(storage));
    }
    bound.push_back(std::move(b));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, log, log);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, log, log);
  } catch (const CLI::ParseError& e) {
    app.exit(e, log, log);
    return kConfigError;
  }

  for (const auto& b : bound) {
    if (!b->sub->parsed()) continue;
    try {
      RunConfig cfg(b->command->schema());
      if (!b->config_file.empty()) cfg.merge_file(b->config_file);
      for (const auto& [key, value] : b->values) {
        if (b->sub->count(flag_name(key)) > 0) cfg.set(key, *value);
      }
      cfg.check_required();
      return b->command->run(cfg, log);
    } catch (const ConfigError& e) {
      log << "error: " << e.what() << '\n';
      return kConfigError;
    } catch (const EmptyDatasetError& e) {
      log << "error: " << e.what() << '\n';
      return kEmptyDataset;
    } catch (const NumericalError& e) {
      log << "error: " << e.what() << '\n';
      return kNumericalViolation;
    } catch (const std::exception& e) {
      log << "error: " << e.what() << '\n';
      return kFailure;
    }
  }
  return kConfigError;
}

}  // namespace rial::cli
