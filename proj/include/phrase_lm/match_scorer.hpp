#pragma once

// Source matching for a phrase occurrence in training text: BM25 over block
// contexts shortlists lexically identical occurrences, then the frozen phrase
// embeddings pick the closest one.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "phrase_lm/corpus.hpp"
#include "phrase_lm/phrase_index.hpp"

namespace phrase_lm {

/// A phrase occurrence together with its surrounding block and embedding.
struct Occurrence {
  SourceSpan span;
  std::span<const TokenId> context;
  std::span<const float> embedding;
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

struct ScoredOccurrence {
  std::size_t index = 0;  // position in the group
  double score = 0.0;
};

/// BM25 of `query` against each occurrence context, with document statistics
/// taken over the group's contexts and idf = ln((N - df + 0.5)/(df + 0.5) + 1).
/// Each distinct query term counts once. Top-n by score, ties by (doc_id, start).
std::vector<ScoredOccurrence> bm25_topn(std::span<const TokenId> query, const std::vector<Occurrence>& group,
                                        std::size_t n = 10, const Bm25Params& params = {});

/// Dot product of two phrase embeddings.
double semantic_sim(std::span<const float> a, std::span<const float> b);

struct MatchScore {
  std::size_t index = 0;  // position in the group
  double bm25 = 0.0;
  double semantic = 0.0;
};

/// Occurrences from the training document itself are excluded; the BM25
/// top-n shortlist is then ranked by semantic_sim. nullopt when nothing
/// eligible remains.
std::optional<MatchScore> best_source(const Occurrence& train, const std::vector<Occurrence>& group,
                                      std::size_t shortlist = 10, const Bm25Params& params = {});

}  // namespace phrase_lm
