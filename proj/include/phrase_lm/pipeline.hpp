#pragma once

// Glue between mining, indexing and oracle construction, shared by the CLI
// and the end-to-end checks.

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "phrase_lm/corpus.hpp"
#include "phrase_lm/neural.hpp"
#include "phrase_lm/oracle.hpp"
#include "phrase_lm/phrase_index.hpp"
#include "phrase_lm/phrase_miner.hpp"

namespace phrase_lm {

void write_candidates(const std::filesystem::path& file, const std::vector<PhraseCandidate>& candidates);
/// Tokens are re-read from `store`; a surface that no longer matches raises
/// ParseError naming the line.
std::vector<PhraseCandidate> read_candidates(const std::filesystem::path& file, const DocumentStore& store,
                                             const TokenVocab& vocab);

/// Externally computed phrase embeddings keyed by source span.
using EmbeddingImport = std::map<SourceSpan, std::vector<float>>;

/// JSONL records {"doc_id", "start", "end", "embedding": [...]} of length `dim`.
EmbeddingImport read_embedding_import(const std::filesystem::path& file, std::size_t dim);

/// One phrase entry per distinct source span, embedded with the frozen phrase
/// encoder (or taken from `imported`, which must cover every entry); token
/// entries come from the model's token embeddings.
PhraseTable index_candidates(const DocumentStore& store, const TokenVocab& vocab,
                             const std::vector<PhraseCandidate>& candidates, const nn::Model& model,
                             const std::string& corpus_id, unsigned threads = 1,
                             const EmbeddingImport* imported = nullptr);

struct OracleSet {
  std::vector<const Document*> docs;
  std::vector<OraclePath> paths;
  std::vector<std::vector<ResolvedCandidate>> resolved;
};

OracleSet build_oracles(const std::vector<const Document*>& docs, const std::vector<PhraseCandidate>& candidates,
                        const PhraseTable& table, const DocumentStore& support, const nn::Model& model,
                        SegmentRule rule = SegmentRule::kScoreGreedy, std::size_t shortlist = 10,
                        unsigned threads = 1);

/// Documents in store order.
std::vector<const Document*> all_documents(const DocumentStore& store);

/// Hex digest of a file's bytes.
std::string file_checksum(const std::filesystem::path& file);

}  // namespace phrase_lm
