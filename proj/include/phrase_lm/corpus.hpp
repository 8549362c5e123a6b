#pragma once

// Document ingestion, block splitting and the token vocabulary.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace phrase_lm {

using TokenId = std::uint32_t;

/// Half-open token interval [start, end).
struct BlockInterval {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - start; }
  bool contains(std::size_t begin, std::size_t finish) const {
    return start <= begin && finish <= end;
  }
  friend bool operator==(const BlockInterval&, const BlockInterval&) = default;
};

/// Splits one whitespace-delimited word into token strings.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<std::string> split_word(std::string_view word) const = 0;
};

/// Default tokenizer: leading and trailing ASCII punctuation characters are
/// detached one per token; interior punctuation ("don't") stays attached.
class WordTokenizer final : public Tokenizer {
 public:
  std::vector<std::string> split_word(std::string_view word) const override;
};

const Tokenizer& default_tokenizer();

/// Whitespace split followed by per-word tokenization.
std::vector<std::string> split_tokens(std::string_view text,
                                      const Tokenizer& tok = default_tokenizer());

bool is_punctuation_token(std::string_view token);

class TokenVocab {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kUnk = 1;

  TokenVocab();

  TokenId add(std::string_view token);
  std::optional<TokenId> find(std::string_view token) const;
  /// Unknown strings map to kUnk.
  TokenId lookup(std::string_view token) const;
  const std::string& str(TokenId id) const;
  std::size_t size() const { return strings_.size(); }

  void save(const std::filesystem::path& path) const;
  static TokenVocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> strings_;
  std::unordered_map<std::string, TokenId> ids_;
};

std::vector<TokenId> tokenize(std::string_view text, const TokenVocab& vocab,
                              const Tokenizer& tok = default_tokenizer());

/// Token strings joined by single spaces.
std::string detokenize(std::span<const TokenId> ids, const TokenVocab& vocab);

struct Document {
  std::string id;
  std::string text;
  std::vector<TokenId> tokens;
  /// Token offset at which each whitespace word of `text` begins.
  std::vector<std::size_t> word_starts;
  std::vector<BlockInterval> blocks;

  std::size_t word_count() const { return word_starts.size(); }
  /// Index of the block containing token `pos`.
  std::size_t block_of(std::size_t pos) const;
};

/// Tokenizes `text` (growing `vocab` when `grow` is set) into a Document
/// whose blocks hold at most `max_words` words.
Document make_document(std::string id, std::string text, TokenVocab& vocab, bool grow,
                       std::size_t max_words = 128,
                       const Tokenizer& tok = default_tokenizer());

/// Consecutive disjoint token intervals covering the document, each spanning
/// at most `max_words` whitespace words.
std::vector<BlockInterval> split_blocks(const Document& doc, std::size_t max_words = 128);

class DocumentStore {
 public:
  /// Throws Error when the id is already present.
  void add(Document doc);

  std::size_t size() const { return docs_.size(); }
  bool empty() const { return docs_.empty(); }
  const Document& operator[](std::size_t i) const { return docs_[i]; }
  const Document* find(std::string_view id) const;
  std::optional<std::size_t> index_of(std::string_view id) const;
  std::size_t block_count() const;

  auto begin() const { return docs_.begin(); }
  auto end() const { return docs_.end(); }

 private:
  std::vector<Document> docs_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct IngestOptions {
  std::size_t max_words = 128;
  /// When false, unseen tokens map to UNK instead of extending the vocab.
  bool grow_vocab = true;
};

/// Reads line-delimited {"id": ..., "text": ...} records. Blank lines are
/// skipped. Malformed lines raise ParseError with the line index.
DocumentStore ingest_corpus(std::istream& in, TokenVocab& vocab, const IngestOptions& opts = {});
DocumentStore ingest_corpus(const std::filesystem::path& path, TokenVocab& vocab,
                            const IngestOptions& opts = {});

}  // namespace phrase_lm
