#pragma once

// JSON-Lines interchange files. One object per line; unknown fields are
// ignored on read, missing or mistyped required fields are a ConfigError.

#include <filesystem>
#include <string>
#include <vector>

#include "rial/data_engine.hpp"

namespace rial::jsonl {

struct RolloutLine {
  PromptId prompt_id = 0;
  int response_id = 0;
  std::vector<TokenId> tokens;
  double log_prob = 0.0;
};

struct AnnotationLine {
  PromptId prompt_id = 0;
  int response_id = 0;
  double p_halluc = 0.0;
  int label = 0;
};

struct PairLine {
  PromptId prompt_id = 0;
  std::vector<TokenId> chosen;
  std::vector<TokenId> rejected;
  double p_chosen = 0.0;
  double p_rejected = 0.0;
};

std::string write_prompts(const std::vector<PromptRecord>& prompts);
std::string write_rollouts(const std::vector<RolloutLine>& lines);
std::string write_annotations(const std::vector<AnnotationLine>& lines);
std::string write_pairs(const std::vector<PairLine>& lines);

std::vector<PromptRecord> read_prompts(const std::string& text);
std::vector<RolloutLine> read_rollouts(const std::string& text);
std::vector<AnnotationLine> read_annotations(const std::string& text);
std::vector<PairLine> read_pairs(const std::string& text);

PairLine to_line(const PreferencePair& pair);

std::string write_classifier(const LearnedClassifier& clf);
LearnedClassifier read_classifier(const std::string& text);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace rial::jsonl
