#pragma once

// Multiple-choice instances scored through option likelihoods.

#include <cstddef>
#include <filesystem>
#include <istream>
#include <string>
#include <vector>

#include "phrase_lm/generator.hpp"

namespace phrase_lm {

struct McInstance {
  std::string question;
  std::vector<std::string> options;
  std::size_t answer = 0;
};

struct McLoadOptions {
  /// Drop instances whose options are all single words.
  bool drop_single_word = false;
};

/// One JSON object per line: {"question", "options": [...], "answer": int}.
std::vector<McInstance> load_mc(std::istream& in, const McLoadOptions& opts = {});
std::vector<McInstance> load_mc(const std::filesystem::path& path, const McLoadOptions& opts = {});

struct McResult {
  std::size_t chosen = 0;
  bool correct = false;
  std::vector<double> scores;
};

struct McReport {
  double accuracy = 0.0;
  std::vector<McResult> results;
};

/// Each option is scored as question ++ option.
McReport evaluate_mc(const std::vector<McInstance>& instances, const nn::Model& model, const PhraseTable& table,
                     const TokenVocab& vocab, const GenerationConfig& cfg);

}  // namespace phrase_lm
