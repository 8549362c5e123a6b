#pragma once

// Phrase candidate mining: constituent spans, IDF statistics over blocks,
// label/length/IDF filtering and lexical grouping.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "phrase_lm/corpus.hpp"

namespace phrase_lm {

using Surface = std::vector<TokenId>;

struct SurfaceHash {
  std::size_t operator()(const Surface& s) const noexcept;
};

struct ConstituentSpan {
  std::string doc_id;
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::string label;

  std::size_t size() const { return end - start; }
  friend bool operator==(const ConstituentSpan&, const ConstituentSpan&) = default;
};

inline constexpr const char* kFallbackLabel = "CHUNK";

/// Reads {"doc_id", "spans": [{"start", "end", "label"}]} records and checks
/// each span against the referenced document.
std::vector<ConstituentSpan> load_spans(std::istream& in, const DocumentStore& store);
std::vector<ConstituentSpan> load_spans(const std::filesystem::path& path, const DocumentStore& store);

/// Degraded substitute for parser output: every window of 2..10 tokens that
/// stays inside one block and contains no punctuation token. Needs the vocab
/// to recognise punctuation.
std::vector<ConstituentSpan> fallback_chunk(const Document& doc, const TokenVocab& vocab,
                                            std::size_t min_len = 2, std::size_t max_len = 10);

/// Block-level document frequencies. Surfaces never seen in any block are
/// stored with df = 0 and have no idf value.
class IdfTable {
 public:
  explicit IdfTable(std::size_t block_count = 0) : block_count_(block_count) {}

  std::size_t block_count() const { return block_count_; }
  std::size_t df(const Surface& s) const;
  /// ln(N / df); nullopt when the surface is unindexable (df = 0 or unknown).
  std::optional<double> idf(const Surface& s) const;
  void set_df(const Surface& s, std::size_t df) { doc_freq_[s] = df; }
  std::size_t size() const { return doc_freq_.size(); }

 private:
  std::size_t block_count_;
  std::unordered_map<Surface, std::size_t, SurfaceHash> doc_freq_;
};

/// Counts, for each surface, the blocks that contain it as a contiguous token
/// subsequence.
IdfTable compute_idf(const DocumentStore& store, const std::vector<Surface>& surfaces);

struct IdfBand {
  double min = 0.0;
  double max = 0.0;
};

/// Per-length (min, max) idf thresholds.
using IdfThresholds = std::map<std::size_t, IdfBand>;

IdfThresholds default_idf_thresholds();
const std::set<std::string>& default_drop_labels();

/// Same band for every length in [min_words, max_words].
IdfThresholds uniform_idf_thresholds(double min, double max, std::size_t min_words = 2,
                                     std::size_t max_words = 10);

struct FilterConfig {
  std::set<std::string> drop_labels = default_drop_labels();
  std::size_t min_words = 2;
  std::size_t max_words = 10;
  IdfThresholds thresholds = default_idf_thresholds();
};

struct PhraseCandidate {
  ConstituentSpan span;
  Surface tokens;
  std::string surface;
  std::size_t word_count = 0;
  double idf = 0.0;
};

/// Keeps a span iff its label is not dropped, its length lies in
/// [min_words, max_words] and its idf lies inside the band for its length.
/// Lengths without a band are dropped. Output sorted by (doc_id, start, end).
std::vector<PhraseCandidate> filter_candidates(const std::vector<ConstituentSpan>& spans,
                                               const DocumentStore& store, const TokenVocab& vocab,
                                               const IdfTable& idf, const FilterConfig& cfg = {});

/// Percentile mode: per length, the band that drops the lowest `low_q` and the
/// highest `high_q` fraction of idf values among `spans` passing the label and
/// length clauses.
IdfThresholds percentile_idf_thresholds(const std::vector<ConstituentSpan>& spans,
                                        const DocumentStore& store, const IdfTable& idf,
                                        const FilterConfig& cfg, double low_q, double high_q);

/// Groups candidates by exact surface string (case-sensitive).
std::map<std::string, std::vector<PhraseCandidate>> group_lexical(const std::vector<PhraseCandidate>& candidates);

/// Surfaces of spans that pass the label and length clauses (deduplicated).
std::vector<Surface> span_surfaces(const std::vector<ConstituentSpan>& spans, const DocumentStore& store,
                                   const FilterConfig& cfg);

Surface span_tokens(const DocumentStore& store, const ConstituentSpan& span);

}  // namespace phrase_lm
