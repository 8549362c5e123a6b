#include "phrase_lm/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>

#include "phrase_lm/error.hpp"
#include "phrase_lm/hash.hpp"
#include "phrase_lm/parallel.hpp"

namespace phrase_lm {

void write_candidates(const std::filesystem::path& file, const std::vector<PhraseCandidate>& candidates) {
  std::ofstream out(file);
  if (!out) throw Error("cannot write " + file.string());
  for (const auto& c : candidates) {
    out << nlohmann::json{{"doc_id", c.span.doc_id}, {"start", c.span.start}, {"end", c.span.end},
                          {"label", c.span.label}, {"surface", c.surface}, {"idf", c.idf}}
               .dump()
        << '\n';
  }
}

std::vector<PhraseCandidate> read_candidates(const std::filesystem::path& file, const DocumentStore& store,
                                             const TokenVocab& vocab) {
  std::ifstream in(file);
  if (!in) throw Error("cannot open " + file.string());
  std::vector<PhraseCandidate> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = "candidates line " + std::to_string(lineno) + ": ";
    PhraseCandidate c;
    try {
      const auto j = nlohmann::json::parse(line);
      c.span = {j.at("doc_id").get<std::string>(), j.at("start").get<std::size_t>(), j.at("end").get<std::size_t>(),
                j.value("label", std::string{})};
      c.surface = j.at("surface").get<std::string>();
      c.idf = j.value("idf", 0.0);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + e.what(), lineno);
    }
    const Document* doc = store.find(c.span.doc_id);
    if (!doc || c.span.end > doc->tokens.size() || c.span.start >= c.span.end) {
      throw ParseError(where + "span does not fit document '" + c.span.doc_id + "'", lineno);
    }
    c.tokens.assign(doc->tokens.begin() + static_cast<std::ptrdiff_t>(c.span.start),
                    doc->tokens.begin() + static_cast<std::ptrdiff_t>(c.span.end));
    if (detokenize(c.tokens, vocab) != c.surface) throw ParseError(where + "surface does not match the corpus", lineno);
    c.word_count = c.tokens.size();
    out.push_back(std::move(c));
  }
  return out;
}

PhraseTable index_candidates(const DocumentStore& store, const TokenVocab& vocab,
                             const std::vector<PhraseCandidate>& candidates, const nn::Model& model,
                             const std::string& corpus_id, unsigned threads, const EmbeddingImport* imported) {
  std::vector<PhraseEntry> entries;
  std::set<SourceSpan> seen;
  for (const auto& c : candidates) {
    SourceSpan src{c.span.doc_id, c.span.start, c.span.end};
    if (!seen.insert(src).second) continue;
    const Document* doc = store.find(src.doc_id);
    if (!doc) throw Error("candidate references unknown document '" + src.doc_id + "'");
    if (!doc->blocks[doc->block_of(src.start)].contains(src.start, src.end)) continue;
    entries.push_back({c.tokens, c.surface, std::move(src)});
  }

  std::vector<std::vector<float>> emb(entries.size());
  if (imported) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto it = imported->find(entries[i].source);
      if (it == imported->end()) {
        const auto& s = entries[i].source;
        throw Error("no imported embedding for (" + s.doc_id + "," + std::to_string(s.start) + "," +
                    std::to_string(s.end) + ")");
      }
      emb[i] = it->second;
    }
  }

  // group entries by (document, block) so each block is encoded once
  std::map<std::pair<std::string, std::size_t>, std::vector<std::size_t>> by_block;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Document* doc = store.find(entries[i].source.doc_id);
    by_block[{doc->id, doc->block_of(entries[i].source.start)}].push_back(i);
  }
  std::vector<std::pair<const Document*, std::size_t>> blocks;
  std::vector<const std::vector<std::size_t>*> members;
  for (const auto& [key, ids] : by_block) {
    blocks.emplace_back(store.find(key.first), key.second);
    members.push_back(&ids);
  }
  if (imported) blocks.clear();
  parallel_for(blocks.size(), threads, [&](std::size_t b) {
    const auto [doc, bi] = blocks[b];
    const auto& blk = doc->blocks[bi];
    const auto states = model.encode_block(std::span<const TokenId>(doc->tokens).subspan(blk.start, blk.size()));
    for (std::size_t i : *members[b]) {
      const auto& s = entries[i].source;
      emb[i] = to_query(model.phrase_from_states(states, s.start - blk.start, s.end - blk.start));
    }
  });

  std::vector<std::string> token_strings;
  for (std::size_t t = 0; t < vocab.size(); ++t) token_strings.push_back(vocab.str(static_cast<TokenId>(t)));
  TableProvenance prov{corpus_id, model.config().seed, model.phrase_encoder_checksum()};
  return build_table(std::move(entries), emb, model.trainable().token_embed, token_strings, std::move(prov));
}

EmbeddingImport read_embedding_import(const std::filesystem::path& file, std::size_t dim) {
  std::ifstream in(file);
  if (!in) throw Error("cannot open " + file.string());
  EmbeddingImport out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = "embeddings line " + std::to_string(lineno) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      SourceSpan s{j.at("doc_id").get<std::string>(), j.at("start").get<std::size_t>(), j.at("end").get<std::size_t>()};
      auto v = j.at("embedding").get<std::vector<float>>();
      if (v.size() != dim) {
        throw ParseError(where + "expected " + std::to_string(dim) + " values, got " + std::to_string(v.size()), lineno);
      }
      out[std::move(s)] = std::move(v);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + e.what(), lineno);
    }
  }
  return out;
}

OracleSet build_oracles(const std::vector<const Document*>& docs, const std::vector<PhraseCandidate>& candidates,
                        const PhraseTable& table, const DocumentStore& support, const nn::Model& model,
                        SegmentRule rule, std::size_t shortlist, unsigned threads) {
  const auto groups = group_entries_by_surface(table);
  std::map<std::string, std::vector<PhraseCandidate>> by_doc;
  for (const auto& c : candidates) by_doc[c.span.doc_id].push_back(c);
  OracleSet out;
  out.docs = docs;
  out.paths.resize(docs.size());
  out.resolved.resize(docs.size());
  static const std::vector<PhraseCandidate> kNone;
  parallel_for(docs.size(), threads, [&](std::size_t i) {
    const Document& d = *docs[i];
    auto it = by_doc.find(d.id);
    out.resolved[i] = resolve_candidates(d, it == by_doc.end() ? kNone : it->second, table, groups, support, model,
                                         shortlist);
    out.paths[i] = segment_path(d.id, d.tokens, out.resolved[i], rule);
  });
  return out;
}

std::vector<const Document*> all_documents(const DocumentStore& store) {
  std::vector<const Document*> out;
  for (const auto& d : store) out.push_back(&d);
  return out;
}

std::string file_checksum(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot open " + file.string());
  Fnv1a h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h.digest()));
  return hex;
}

}  // namespace phrase_lm
