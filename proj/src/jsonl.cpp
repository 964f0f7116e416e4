#include "rial/jsonl.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rial/error.hpp"

namespace rial::jsonl {

using nlohmann::json;

namespace {

template <class Fn>
void for_each_line(const std::string& text, Fn&& fn) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ConfigError("line " + std::to_string(number) + ": invalid JSON: " + e.what());
    }
    if (!obj.is_object()) throw ConfigError("line " + std::to_string(number) + ": expected a JSON object");
    try {
      fn(obj);
    } catch (const json::exception& e) {
      throw ConfigError("line " + std::to_string(number) + ": " + e.what());
    }
  }
}

template <class T>
T field(const json& obj, const char* name) {
  if (!obj.contains(name)) throw ConfigError(std::string("missing field '") + name + "'");
  return obj.at(name).get<T>();
}

std::string dump_lines(const std::vector<json>& objs) {
  std::string out;
  for (const json& o : objs) {
    out += o.dump();
    out += '\n';
  }
  return out;
}

}  // namespace

std::string write_prompts(const std::vector<PromptRecord>& prompts) {
  std::vector<json> objs;
  for (const PromptRecord& p : prompts) {
    json o;
    o["id"] = p.id;
    o["gt_tokens"] = p.ground_truth;
    o["halluc_set"] = p.halluc_set;
    objs.push_back(std::move(o));
  }
  return dump_lines(objs);
}

std::vector<PromptRecord> read_prompts(const std::string& text) {
  std::vector<PromptRecord> out;
  for_each_line(text, [&](const json& o) {
    PromptRecord p;
    p.id = field<PromptId>(o, "id");
    p.ground_truth = field<std::vector<TokenId>>(o, "gt_tokens");
    p.halluc_set = field<std::vector<TokenId>>(o, "halluc_set");
    std::sort(p.halluc_set.begin(), p.halluc_set.end());
    p.halluc_set.erase(std::unique(p.halluc_set.begin(), p.halluc_set.end()), p.halluc_set.end());
    if (p.halluc_set.empty()) throw ConfigError("prompt " + std::to_string(p.id) + " has an empty halluc_set");
    if (p.contains_hallucination(p.ground_truth)) {
      throw ConfigError("prompt " + std::to_string(p.id) + " ground truth contains a hallucination token");
    }
    out.push_back(std::move(p));
  });
  return out;
}

std::string write_rollouts(const std::vector<RolloutLine>& lines) {
  std::vector<json> objs;
  for (const auto& l : lines) {
    json o;
    o["prompt_id"] = l.prompt_id;
    o["response_id"] = l.response_id;
    o["tokens"] = l.tokens;
    o["log_prob"] = l.log_prob;
    objs.push_back(std::move(o));
  }
  return dump_lines(objs);
}

std::vector<RolloutLine> read_rollouts(const std::string& text) {
  std::vector<RolloutLine> out;
  for_each_line(text, [&](const json& o) {
    out.push_back({field<PromptId>(o, "prompt_id"), field<int>(o, "response_id"),
                   field<std::vector<TokenId>>(o, "tokens"), field<double>(o, "log_prob")});
  });
  return out;
}

std::string write_annotations(const std::vector<AnnotationLine>& lines) {
  std::vector<json> objs;
  for (const auto& l : lines) {
    json o;
    o["prompt_id"] = l.prompt_id;
    o["response_id"] = l.response_id;
    o["p_halluc"] = l.p_halluc;
    o["label"] = l.label;
    objs.push_back(std::move(o));
  }
  return dump_lines(objs);
}

std::vector<AnnotationLine> read_annotations(const std::string& text) {
  std::vector<AnnotationLine> out;
  for_each_line(text, [&](const json& o) {
    AnnotationLine l{field<PromptId>(o, "prompt_id"), field<int>(o, "response_id"), field<double>(o, "p_halluc"),
                     field<int>(o, "label")};
    if (l.label != 0 && l.label != 1) throw ConfigError("label must be 0 or 1");
    if (!(l.p_halluc >= 0.0 && l.p_halluc <= 1.0)) throw ConfigError("p_halluc must lie in [0, 1]");
    out.push_back(l);
  });
  return out;
}

std::string write_pairs(const std::vector<PairLine>& lines) {
  std::vector<json> objs;
  for (const auto& l : lines) {
    json o;
    o["prompt_id"] = l.prompt_id;
    o["chosen"] = l.chosen;
    o["rejected"] = l.rejected;
    o["p_chosen"] = l.p_chosen;
    o["p_rejected"] = l.p_rejected;
    objs.push_back(std::move(o));
  }
  return dump_lines(objs);
}

std::vector<PairLine> read_pairs(const std::string& text) {
  std::vector<PairLine> out;
  for_each_line(text, [&](const json& o) {
    out.push_back({field<PromptId>(o, "prompt_id"), field<std::vector<TokenId>>(o, "chosen"),
                   field<std::vector<TokenId>>(o, "rejected"), field<double>(o, "p_chosen"),
                   field<double>(o, "p_rejected")});
  });
  return out;
}

PairLine to_line(const PreferencePair& pair) {
  return {pair.prompt, pair.chosen.tokens, pair.rejected.tokens, pair.p_halluc_chosen, pair.p_halluc_rejected};
}

std::string write_classifier(const LearnedClassifier& clf) {
  json o;
  o["vocab"] = clf.recipe.vocab;
  o["evidence_noise"] = clf.recipe.evidence_noise;
  o["seed"] = clf.recipe.seed;
  o["weights"] = std::vector<double>(clf.weights.data(), clf.weights.data() + clf.weights.size());
  o["bias"] = clf.bias;
  o["validation_accuracy"] = clf.validation_accuracy;
  return o.dump(2) + "\n";
}

LearnedClassifier read_classifier(const std::string& text) {
  json o;
  try {
    o = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("classifier: invalid JSON: ") + e.what());
  }
  try {
    LearnedClassifier clf;
    clf.recipe.vocab = field<int>(o, "vocab");
    clf.recipe.evidence_noise = field<double>(o, "evidence_noise");
    clf.recipe.seed = field<std::uint64_t>(o, "seed");
    const auto w = field<std::vector<double>>(o, "weights");
    if (static_cast<int>(w.size()) != clf.recipe.size()) throw ConfigError("classifier: weight count mismatch");
    clf.weights = Eigen::Map<const Vec>(w.data(), static_cast<Eigen::Index>(w.size()));
    clf.bias = field<double>(o, "bias");
    clf.validation_accuracy = o.value("validation_accuracy", 0.0);
    return clf;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("classifier: ") + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

}  // namespace rial::jsonl
