#include "phrase_lm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <sstream>

#include <json.hpp>

#include "phrase_lm/error.hpp"

namespace phrase_lm {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

template <typename Fn>
void for_each_word(std::string_view text, Fn&& fn) {
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) fn(text.substr(i, j - i));
    i = j;
  }
}

}  // namespace

std::vector<std::string> WordTokenizer::split_word(std::string_view word) const {
  std::vector<std::string> out;
  std::size_t lead = 0;
  while (lead < word.size() && is_punct(word[lead])) ++lead;
  if (lead == word.size()) {
    for (char c : word) out.emplace_back(1, c);
    return out;
  }
  std::size_t trail = word.size();
  while (trail > lead && is_punct(word[trail - 1])) --trail;
  for (std::size_t i = 0; i < lead; ++i) out.emplace_back(1, word[i]);
  out.emplace_back(word.substr(lead, trail - lead));
  for (std::size_t i = trail; i < word.size(); ++i) out.emplace_back(1, word[i]);
  return out;
}

const Tokenizer& default_tokenizer() {
  static const WordTokenizer tok;
  return tok;
}

std::vector<std::string> split_tokens(std::string_view text, const Tokenizer& tok) {
  std::vector<std::string> out;
  for_each_word(text, [&](std::string_view w) {
    for (auto& piece : tok.split_word(w)) out.push_back(std::move(piece));
  });
  return out;
}

bool is_punctuation_token(std::string_view token) {
  return !token.empty() && std::all_of(token.begin(), token.end(), is_punct);
}

TokenVocab::TokenVocab() {
  add("<bos>");
  add("<unk>");
}

TokenId TokenVocab::add(std::string_view token) {
  if (auto it = ids_.find(std::string(token)); it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(strings_.size());
  strings_.emplace_back(token);
  ids_.emplace(strings_.back(), id);
  return id;
}

std::optional<TokenId> TokenVocab::find(std::string_view token) const {
  if (auto it = ids_.find(std::string(token)); it != ids_.end()) return it->second;
  return std::nullopt;
}

TokenId TokenVocab::lookup(std::string_view token) const {
  return find(token).value_or(kUnk);
}

const std::string& TokenVocab::str(TokenId id) const {
  if (id >= strings_.size()) throw Error("token id " + std::to_string(id) + " out of range");
  return strings_[id];
}

void TokenVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocab " + path.string());
  for (const auto& s : strings_) out << s << '\n';
}

TokenVocab TokenVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read vocab " + path.string());
  TokenVocab vocab;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (n < 2) {
      if (line != vocab.strings_[n]) throw ParseError("vocab must start with <bos>, <unk>", n + 1);
    } else {
      if (line.empty() || vocab.find(line)) {
        throw ParseError("empty or duplicate vocab entry at line " + std::to_string(n + 1), n + 1);
      }
      vocab.add(line);
    }
    ++n;
  }
  return vocab;
}

std::vector<TokenId> tokenize(std::string_view text, const TokenVocab& vocab, const Tokenizer& tok) {
  std::vector<TokenId> ids;
  for (const auto& s : split_tokens(text, tok)) ids.push_back(vocab.lookup(s));
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const TokenVocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.str(ids[i]);
  }
  return out;
}

std::size_t Document::block_of(std::size_t pos) const {
  auto it = std::upper_bound(blocks.begin(), blocks.end(), pos,
                             [](std::size_t p, const BlockInterval& b) { return p < b.end; });
  if (it == blocks.end() || pos < it->start) {
    throw Error("token " + std::to_string(pos) + " outside document " + id);
  }
  return static_cast<std::size_t>(it - blocks.begin());
}

Document make_document(std::string id, std::string text, TokenVocab& vocab, bool grow,
                       std::size_t max_words, const Tokenizer& tok) {
  Document doc;
  doc.id = std::move(id);
  doc.text = std::move(text);
  for_each_word(doc.text, [&](std::string_view w) {
    doc.word_starts.push_back(doc.tokens.size());
    for (const auto& piece : tok.split_word(w)) {
      doc.tokens.push_back(grow ? vocab.add(piece) : vocab.lookup(piece));
    }
  });
  doc.blocks = split_blocks(doc, max_words);
  return doc;
}

std::vector<BlockInterval> split_blocks(const Document& doc, std::size_t max_words) {
  if (max_words < 1) throw ConfigError("max_words must be at least 1");
  std::vector<BlockInterval> out;
  const std::size_t words = doc.word_starts.size();
  for (std::size_t w = 0; w < words; w += max_words) {
    const std::size_t start = doc.word_starts[w];
    const std::size_t end = w + max_words < words ? doc.word_starts[w + max_words] : doc.tokens.size();
    out.push_back({start, end});
  }
  return out;
}

void DocumentStore::add(Document doc) {
  if (index_.count(doc.id)) throw Error("duplicate document id '" + doc.id + "'");
  index_.emplace(doc.id, docs_.size());
  docs_.push_back(std::move(doc));
}

const Document* DocumentStore::find(std::string_view id) const {
  auto idx = index_of(id);
  return idx ? &docs_[*idx] : nullptr;
}

std::optional<std::size_t> DocumentStore::index_of(std::string_view id) const {
  if (auto it = index_.find(std::string(id)); it != index_.end()) return it->second;
  return std::nullopt;
}

std::size_t DocumentStore::block_count() const {
  std::size_t n = 0;
  for (const auto& d : docs_) n += d.blocks.size();
  return n;
}

DocumentStore ingest_corpus(std::istream& in, TokenVocab& vocab, const IngestOptions& opts) {
  if (opts.max_words < 1) throw ConfigError("max_words must be at least 1");
  DocumentStore store;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), is_space)) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("corpus line " + std::to_string(lineno) + ": " + e.what(), lineno);
    }
    if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string() || !rec.contains("text") ||
        !rec["text"].is_string()) {
      throw ParseError("corpus line " + std::to_string(lineno) + ": expected string fields \"id\" and \"text\"",
                       lineno);
    }
    auto id = rec["id"].get<std::string>();
    if (store.find(id)) throw Error("duplicate document id '" + id + "' at corpus line " + std::to_string(lineno));
    store.add(make_document(std::move(id), rec["text"].get<std::string>(), vocab, opts.grow_vocab,
                            opts.max_words));
  }
  return store;
}

DocumentStore ingest_corpus(const std::filesystem::path& path, TokenVocab& vocab, const IngestOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read corpus " + path.string());
  return ingest_corpus(in, vocab, opts);
}

}  // namespace phrase_lm
