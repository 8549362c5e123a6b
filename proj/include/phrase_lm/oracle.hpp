#pragma once

// Training oracles: each training text segmented into a path of phrase steps
// (with a source occurrence in a supporting document) and token steps.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phrase_lm/corpus.hpp"
#include "phrase_lm/match_scorer.hpp"
#include "phrase_lm/neural.hpp"
#include "phrase_lm/phrase_index.hpp"
#include "phrase_lm/phrase_miner.hpp"

namespace phrase_lm {

enum class StepKind { kPhrase, kToken };

struct OracleStep {
  StepKind kind = StepKind::kToken;
  std::size_t position = 0;
  std::size_t length = 1;
  std::optional<SourceSpan> source;  // phrase steps
  TokenId token_id = 0;              // token steps
  double score = 0.0;                // phrase steps

  friend bool operator==(const OracleStep&, const OracleStep&) = default;
};

struct OraclePath {
  std::string doc_id;
  std::vector<OracleStep> steps;

  std::size_t covered() const { return steps.empty() ? 0 : steps.back().position + steps.back().length; }
  friend bool operator==(const OraclePath&, const OraclePath&) = default;
};

/// A phrase occurrence [start, end) of a training text with its chosen source.
struct ResolvedCandidate {
  std::size_t start = 0;
  std::size_t end = 0;
  SourceSpan source;
  double score = 0.0;

  friend bool operator==(const ResolvedCandidate&, const ResolvedCandidate&) = default;
};

enum class SegmentRule {
  kScoreGreedy,   // highest match score, then longer, then smaller source
  kLengthGreedy,  // longest, then higher score, then smaller source
};

/// Left-to-right segmentation of text[from, n): at each position take the best
/// resolved candidate starting there, else a token step.
std::vector<OracleStep> segment_greedy(std::span<const TokenId> text, const std::vector<ResolvedCandidate>& resolved,
                                       SegmentRule rule = SegmentRule::kScoreGreedy, std::size_t from = 0);

OraclePath segment_path(const std::string& doc_id, std::span<const TokenId> text,
                        const std::vector<ResolvedCandidate>& resolved, SegmentRule rule = SegmentRule::kScoreGreedy);

/// Throws Error unless steps start at 0, are contiguous, have legal lengths
/// and, when `text` is given, cover it exactly with matching token ids.
void validate_path(const OraclePath& path, std::optional<std::span<const TokenId>> text = std::nullopt);

/// Resolves each filtered candidate of a training document to its best source
/// among the table's phrase entries with the same surface (BM25 shortlist over
/// block contexts, then frozen-encoder similarity). Unresolvable candidates
/// are dropped.
std::vector<ResolvedCandidate> resolve_candidates(const Document& train_doc,
                                                  const std::vector<PhraseCandidate>& candidates,
                                                  const PhraseTable& table, const SurfaceGroups& groups,
                                                  const DocumentStore& support,
                                                  const nn::Model& model, std::size_t shortlist = 10);

void write_oracle(std::ostream& out, const std::vector<OraclePath>& paths);
void write_oracle(const std::filesystem::path& file, const std::vector<OraclePath>& paths);
/// Parse or tiling failures raise ParseError carrying the record index.
std::vector<OraclePath> read_oracle(std::istream& in);
std::vector<OraclePath> read_oracle(const std::filesystem::path& file);

/// Resolved candidates per training document, one record per line.
void write_resolved(const std::filesystem::path& file, const std::vector<std::string>& doc_ids,
                    const std::vector<std::vector<ResolvedCandidate>>& resolved);
std::vector<std::pair<std::string, std::vector<ResolvedCandidate>>> read_resolved(const std::filesystem::path& file);

}  // namespace phrase_lm
