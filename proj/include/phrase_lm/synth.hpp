#pragma once

// Planted-phrase synthetic corpus: pseudo-word filler text in which a fixed
// set of multi-word phrases recurs, each announced by its own cue word.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "phrase_lm/mc_datasets.hpp"
#include "phrase_lm/phrase_miner.hpp"

namespace phrase_lm {

struct SynthConfig {
  std::size_t docs = 500;
  std::size_t filler_words = 300;
  std::size_t phrases = 40;
  std::size_t min_words = 40;  // per document, approximate
  std::size_t max_words = 70;
  std::size_t mc_instances = 50;
  std::size_t mc_options = 4;
  std::string id_prefix = "syn";
  std::uint64_t seed = 7;
};

struct SynthDoc {
  std::string id;
  std::string text;
};

struct SynthCorpus {
  std::vector<SynthDoc> docs;
  std::vector<ConstituentSpan> spans;     // token offsets
  std::vector<std::vector<std::string>> planted;  // phrase words
  std::vector<std::string> cues;                  // cue word per phrase
  std::vector<McInstance> mc;
};

SynthCorpus make_synthetic(const SynthConfig& cfg);

/// Writes corpus.jsonl, spans.jsonl and mc.jsonl into `dir`.
void write_synthetic(const SynthCorpus& c, const std::filesystem::path& dir);

}  // namespace phrase_lm
