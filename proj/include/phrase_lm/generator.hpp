#pragma once

// Inference over the phrase table: next-step distributions, nucleus sampling,
// attributed generation, segmentation-summed likelihood and option scoring.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "phrase_lm/corpus.hpp"
#include "phrase_lm/neural.hpp"
#include "phrase_lm/oracle.hpp"
#include "phrase_lm/phrase_index.hpp"

namespace phrase_lm {

struct GenerationConfig {
  std::size_t k = 128;
  double phi = 0.4;
  double top_p = 0.95;
  std::size_t max_new_tokens = 128;
  std::uint64_t seed = 0;
  /// Likelihood: restrict step distributions to the retrieved top-k (no
  /// full-vocabulary union).
  bool dp_topk_only = false;
  /// Likelihood: take the max instead of the sum over lexically identical
  /// matching entries.
  bool dp_max_identical = false;
  /// Option scoring: divide log-likelihoods by the token count.
  bool normalize_options = false;
  /// Approximate retrieval; exact search when null.
  const IvfIndex* ivf = nullptr;
  std::size_t nprobe = 1;
  unsigned threads = 1;

  void validate() const;
};

struct Candidate {
  std::size_t entry = 0;
  double probability = 0.0;
  bool phrase = false;
};

struct CandidateDistribution {
  std::vector<Candidate> candidates;  // retrieval order
  bool fell_back = false;             // every candidate was filtered
};

/// Softmax over `hits`, then phrase candidates below phi are removed and the
/// rest renormalized. Token candidates are never removed.
CandidateDistribution filtered_softmax(const PhraseTable& table, const std::vector<SearchHit>& hits, double phi);

std::vector<SearchHit> retrieve(const PhraseTable& table, std::span<const float> query, const GenerationConfig& cfg);

CandidateDistribution next_distribution(const nn::Vec& query, const PhraseTable& table, const GenerationConfig& cfg);
CandidateDistribution next_distribution(std::span<const TokenId> prefix, const nn::Model& model,
                                        const PhraseTable& table, const GenerationConfig& cfg);

/// Index into dist.candidates. Sorted by probability (ties: entry id), the
/// nucleus is the shortest prefix with mass >= p.
std::size_t sample_top_p(const CandidateDistribution& dist, double p, std::mt19937_64& rng);

struct GenerationStep {
  std::string surface;
  StepKind kind = StepKind::kToken;
  std::size_t entry = 0;
  std::optional<SourceSpan> source;  // phrase steps, possibly truncated
  TokenId token_id = 0;              // token steps
  std::size_t length = 1;            // tokens emitted
  double probability = 0.0;
};

struct GenerationRecord {
  std::vector<GenerationStep> steps;
  std::vector<TokenId> tokens;
  std::string text;
  double token_rate = 0.0;

  std::size_t decode_steps() const { return steps.size(); }
};

GenerationRecord generate(std::span<const TokenId> prefix, const nn::Model& model, const PhraseTable& table,
                          const TokenVocab& vocab, const GenerationConfig& cfg);

// ---- likelihood ----

struct LatticeArc {
  std::size_t length = 1;
  double log_prob = 0.0;
};

/// Forward pass over the segmentation lattice of n tokens. arcs(j) lists the
/// ways to continue from position j; arcs running past n are ignored.
double lattice_log_likelihood(std::size_t n, const std::function<std::vector<LatticeArc>(std::size_t)>& arcs);

struct DpStats {
  std::size_t distributions = 0;
};

/// log P(text | prefix), summed over all phrase/token segmentations.
double dp_likelihood(std::span<const TokenId> text, std::span<const TokenId> prefix, const nn::Model& model,
                     const PhraseTable& table, const GenerationConfig& cfg, DpStats* stats = nullptr);

/// Step distribution used by the likelihood at one query: candidate entries
/// with probabilities (top-k phrases plus the full vocabulary by default).
CandidateDistribution likelihood_distribution(const nn::Vec& query, const PhraseTable& table,
                                              const GenerationConfig& cfg);

struct OptionScores {
  std::size_t chosen = 0;
  std::vector<double> scores;
};

/// Scores question ++ option for every option from BOS; highest wins, ties
/// go to the lowest index.
OptionScores score_options(std::span<const TokenId> question, const std::vector<std::vector<TokenId>>& options,
                           const nn::Model& model, const PhraseTable& table, const GenerationConfig& cfg);

}  // namespace phrase_lm
