#pragma once

// The phrase table (contextualized phrase entries plus the token vocabulary
// as single-token entries) and maximum inner product search over it.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "phrase_lm/corpus.hpp"
#include "phrase_lm/neural.hpp"
#include "phrase_lm/phrase_miner.hpp"

namespace phrase_lm {

struct SourceSpan {
  std::string doc_id;
  std::size_t start = 0;
  std::size_t end = 0;

  friend bool operator==(const SourceSpan&, const SourceSpan&) = default;
  friend auto operator<=>(const SourceSpan&, const SourceSpan&) = default;
};

/// Phrase entry metadata. The embedding lives in the table's matrix.
struct PhraseEntry {
  std::vector<TokenId> tokens;
  std::string surface;
  SourceSpan source;
};

struct TableProvenance {
  std::string corpus_id;
  std::uint64_t encoder_seed = 0;
  std::uint64_t encoder_checksum = 0;
  friend bool operator==(const TableProvenance&, const TableProvenance&) = default;
};

struct SearchHit {
  std::size_t entry_id = 0;
  double score = 0.0;
  friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

/// Phrase entries occupy ids [0, P); token t is entry P + t.
class PhraseTable {
 public:
  PhraseTable() = default;

  std::size_t dim() const { return dim_; }
  std::size_t phrase_count() const { return phrases_.size(); }
  std::size_t token_count() const { return token_strings_.size(); }
  std::size_t size() const { return phrase_count() + token_count(); }

  bool is_token(std::size_t id) const { return id >= phrase_count(); }
  TokenId token_of(std::size_t id) const { return static_cast<TokenId>(id - phrase_count()); }
  std::size_t token_entry(TokenId t) const { return phrase_count() + t; }

  const PhraseEntry& phrase(std::size_t id) const { return phrases_.at(id); }
  const std::vector<PhraseEntry>& phrases() const { return phrases_; }
  /// Surface token ids of any entry (one token for token entries).
  std::span<const TokenId> surface_tokens(std::size_t id) const;
  std::string surface(std::size_t id) const;

  std::span<const float> embedding(std::size_t id) const {
    return {embeddings_.data() + id * dim_, dim_};
  }
  const std::vector<float>& embeddings() const { return embeddings_; }

  /// Replaces the token rows (V x dim).
  void set_token_embeddings(const nn::Mat& token_embed);

  std::optional<std::size_t> find_source(const SourceSpan& src) const;

  const TableProvenance& provenance() const { return provenance_; }

  /// Writes `path` and the sidecar `path + ".meta.jsonl"`.
  void save(const std::filesystem::path& path) const;
  static PhraseTable load(const std::filesystem::path& path);

  friend PhraseTable build_table(std::vector<PhraseEntry> entries, const std::vector<std::vector<float>>& embeddings,
                                 const nn::Mat& token_embed, const std::vector<std::string>& token_strings,
                                 TableProvenance provenance);
  friend PhraseTable merge_tables(const PhraseTable& a, const PhraseTable& b, bool allow_encoder_mismatch);

 private:
  void rebuild_source_index();

  std::size_t dim_ = 0;
  std::vector<PhraseEntry> phrases_;
  std::vector<std::string> token_strings_;
  std::vector<TokenId> token_ids_;  // 0..V-1, for surface_tokens()
  std::vector<float> embeddings_;   // row-major, size() x dim
  TableProvenance provenance_;
  std::map<SourceSpan, std::size_t> by_source_;  // first entry per source
};

/// Phrase entries get ids 0..P-1 in input order; token entries follow.
/// Duplicate sources are kept. Throws on dimension mismatch, naming the entry.
PhraseTable build_table(std::vector<PhraseEntry> entries, const std::vector<std::vector<float>>& embeddings,
                        const nn::Mat& token_embed, const std::vector<std::string>& token_strings,
                        TableProvenance provenance);

std::string sidecar_path(const std::filesystem::path& table_path);

/// Converts a model-space vector to the float query used for search.
std::vector<float> to_query(const nn::Vec& v);

/// Raw dot product accumulated in double, in dimension order.
double dot_score(std::span<const float> a, std::span<const float> b);

/// Top-k by dot product; descending score, ties by ascending entry id.
std::vector<SearchHit> search_exact(const PhraseTable& table, std::span<const float> query, std::size_t k);

/// Inverted-file index: spherical k-means centroids (dot-product assignment)
/// with exact scoring inside the probed lists.
class IvfIndex {
 public:
  static IvfIndex build(const PhraseTable& table, std::size_t nlist, std::uint64_t seed, std::size_t iterations = 20);

  std::size_t nlist() const { return lists_.size(); }
  const std::vector<std::vector<std::size_t>>& lists() const { return lists_; }

  std::vector<SearchHit> search(const PhraseTable& table, std::span<const float> query, std::size_t k,
                                std::size_t nprobe) const;

 private:
  std::size_t dim_ = 0;
  std::vector<float> centroids_;  // nlist x dim, unit norm
  std::vector<std::vector<std::size_t>> lists_;
};

/// Concatenates phrase entries (a first), keeps a's token entries. Requires
/// equal dims and, unless overridden, equal encoder checksums.
PhraseTable merge_tables(const PhraseTable& a, const PhraseTable& b, bool allow_encoder_mismatch = false);

/// Entries whose source span no longer reproduces their surface in `store`
/// (missing documents count as failures). Empty means fully attributable.
std::vector<std::size_t> attribution_failures(const PhraseTable& table, const DocumentStore& store);

using SurfaceGroups = std::unordered_map<std::vector<TokenId>, std::vector<std::size_t>, SurfaceHash>;

/// Phrase entry ids grouped by exact surface tokens, ids ascending.
SurfaceGroups group_entries_by_surface(const PhraseTable& table);

/// Top-k recall of `approx` against `exact` (set overlap / |exact|).
double recall_at_k(const std::vector<SearchHit>& exact, const std::vector<SearchHit>& approx);

}  // namespace phrase_lm
