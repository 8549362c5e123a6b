#include "phrase_lm/phrase_index.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_set>

#include <json.hpp>

#include "phrase_lm/error.hpp"

namespace phrase_lm {

namespace {

constexpr std::uint32_t kTableVersion = 1;
constexpr std::uint32_t kKindPhrase = 0;
constexpr std::uint32_t kKindToken = 1;

bool hit_before(const SearchHit& a, const SearchHit& b) {
  return a.score > b.score || (a.score == b.score && a.entry_id < b.entry_id);
}

std::vector<SearchHit> top_k(std::vector<SearchHit> hits, std::size_t k) {
  k = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), hit_before);
  hits.resize(k);
  return hits;
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error("truncated phrase table " + what);
  return v;
}

}  // namespace

std::string sidecar_path(const std::filesystem::path& table_path) { return table_path.string() + ".meta.jsonl"; }

std::span<const TokenId> PhraseTable::surface_tokens(std::size_t id) const {
  if (is_token(id)) return {token_ids_.data() + token_of(id), 1};
  return phrases_.at(id).tokens;
}

std::string PhraseTable::surface(std::size_t id) const {
  if (is_token(id)) return token_strings_.at(token_of(id));
  return phrases_.at(id).surface;
}

void PhraseTable::set_token_embeddings(const nn::Mat& token_embed) {
  if (static_cast<std::size_t>(token_embed.rows()) != token_count() ||
      static_cast<std::size_t>(token_embed.cols()) != dim_) {
    throw Error("token embedding shape does not match the phrase table");
  }
  float* dst = embeddings_.data() + phrase_count() * dim_;
  for (Eigen::Index r = 0; r < token_embed.rows(); ++r) {
    for (Eigen::Index c = 0; c < token_embed.cols(); ++c) *dst++ = static_cast<float>(token_embed(r, c));
  }
}

std::optional<std::size_t> PhraseTable::find_source(const SourceSpan& src) const {
  if (auto it = by_source_.find(src); it != by_source_.end()) return it->second;
  return std::nullopt;
}

void PhraseTable::rebuild_source_index() {
  by_source_.clear();
  for (std::size_t i = 0; i < phrases_.size(); ++i) by_source_.emplace(phrases_[i].source, i);
  token_ids_.resize(token_strings_.size());
  std::iota(token_ids_.begin(), token_ids_.end(), TokenId{0});
}

PhraseTable build_table(std::vector<PhraseEntry> entries, const std::vector<std::vector<float>>& embeddings,
                        const nn::Mat& token_embed, const std::vector<std::string>& token_strings,
                        TableProvenance provenance) {
  if (entries.size() != embeddings.size()) throw Error("one embedding is required per phrase entry");
  if (static_cast<std::size_t>(token_embed.rows()) != token_strings.size()) {
    throw Error("token embedding rows do not match the token vocabulary");
  }
  PhraseTable t;
  t.dim_ = static_cast<std::size_t>(token_embed.cols());
  t.embeddings_.reserve((entries.size() + token_strings.size()) * t.dim_);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (embeddings[i].size() != t.dim_) {
      throw Error("phrase entry " + std::to_string(i) + " ('" + entries[i].surface + "') has dimension " +
                  std::to_string(embeddings[i].size()) + ", expected " + std::to_string(t.dim_));
    }
    t.embeddings_.insert(t.embeddings_.end(), embeddings[i].begin(), embeddings[i].end());
  }
  t.embeddings_.resize((entries.size() + token_strings.size()) * t.dim_);
  t.phrases_ = std::move(entries);
  t.token_strings_ = token_strings;
  t.provenance_ = std::move(provenance);
  t.rebuild_source_index();
  t.set_token_embeddings(token_embed);
  return t;
}

// ---------------------------------------------------------------------------
// persistence

void PhraseTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write phrase table " + path.string());
  out.write("PHRT", 4);
  write_pod<std::uint32_t>(out, kTableVersion);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
  write_pod<std::uint64_t>(out, phrase_count());
  write_pod<std::uint64_t>(out, token_count());
  // fixed-width records: kind, aux (surface length | token id), start, end
  for (const auto& e : phrases_) {
    write_pod<std::uint32_t>(out, kKindPhrase);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.tokens.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.source.start));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.source.end));
  }
  for (std::size_t t = 0; t < token_count(); ++t) {
    write_pod<std::uint32_t>(out, kKindToken);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t));
    write_pod<std::uint32_t>(out, 0);
    write_pod<std::uint32_t>(out, 0);
  }
  out.write(reinterpret_cast<const char*>(embeddings_.data()),
            static_cast<std::streamsize>(embeddings_.size() * sizeof(float)));
  if (!out) throw Error("failed writing phrase table " + path.string());

  std::ofstream meta(sidecar_path(path), std::ios::binary);
  if (!meta) throw Error("cannot write " + sidecar_path(path));
  nlohmann::json head = {{"provenance",
                          {{"corpus_id", provenance_.corpus_id},
                           {"encoder_seed", provenance_.encoder_seed},
                           {"encoder_checksum", provenance_.encoder_checksum}}}};
  meta << head.dump() << '\n';
  for (std::size_t i = 0; i < phrases_.size(); ++i) {
    const auto& e = phrases_[i];
    nlohmann::json rec = {{"entry_id", i},          {"surface", e.surface},    {"tokens", e.tokens},
                          {"doc_id", e.source.doc_id}, {"start", e.source.start}, {"end", e.source.end}};
    meta << rec.dump() << '\n';
  }
  for (std::size_t t = 0; t < token_count(); ++t) {
    meta << nlohmann::json({{"entry_id", phrase_count() + t}, {"token", token_strings_[t]}}).dump() << '\n';
  }
}

PhraseTable PhraseTable::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read phrase table " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "PHRT", 4) != 0) throw Error("not a phrase table: " + path.string());
  const auto what = path.string();
  if (read_pod<std::uint32_t>(in, what) != kTableVersion) throw Error("unsupported phrase table version");
  PhraseTable t;
  t.dim_ = read_pod<std::uint32_t>(in, what);
  const auto n_phrase = read_pod<std::uint64_t>(in, what);
  const auto n_token = read_pod<std::uint64_t>(in, what);
  struct Record {
    std::uint32_t kind, aux, start, end;
  };
  std::vector<Record> records(n_phrase + n_token);
  for (auto& r : records) {
    r.kind = read_pod<std::uint32_t>(in, what);
    r.aux = read_pod<std::uint32_t>(in, what);
    r.start = read_pod<std::uint32_t>(in, what);
    r.end = read_pod<std::uint32_t>(in, what);
  }
  t.embeddings_.resize((n_phrase + n_token) * t.dim_);
  in.read(reinterpret_cast<char*>(t.embeddings_.data()),
          static_cast<std::streamsize>(t.embeddings_.size() * sizeof(float)));
  if (!in) throw Error("truncated phrase table " + what);
  if (in.peek() != std::char_traits<char>::eof()) throw Error("trailing bytes in phrase table " + what);

  std::ifstream meta(sidecar_path(path), std::ios::binary);
  if (!meta) throw Error("cannot read " + sidecar_path(path));
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() {
    if (!std::getline(meta, line)) throw ParseError("sidecar ended early at line " + std::to_string(lineno + 1), lineno + 1);
    ++lineno;
    try {
      return nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("sidecar line " + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  };
  try {
    const auto head = next().at("provenance");
    t.provenance_.corpus_id = head.at("corpus_id").get<std::string>();
    t.provenance_.encoder_seed = head.at("encoder_seed").get<std::uint64_t>();
    t.provenance_.encoder_checksum = head.at("encoder_checksum").get<std::uint64_t>();
    for (std::uint64_t i = 0; i < n_phrase; ++i) {
      const auto rec = next();
      PhraseEntry e;
      e.tokens = rec.at("tokens").get<std::vector<TokenId>>();
      e.surface = rec.at("surface").get<std::string>();
      e.source = {rec.at("doc_id").get<std::string>(), rec.at("start").get<std::size_t>(),
                  rec.at("end").get<std::size_t>()};
      const auto& r = records[i];
      if (r.kind != kKindPhrase || r.aux != e.tokens.size() || r.start != e.source.start || r.end != e.source.end) {
        throw ParseError("sidecar line " + std::to_string(lineno) + " disagrees with the binary record", lineno);
      }
      t.phrases_.push_back(std::move(e));
    }
    for (std::uint64_t i = 0; i < n_token; ++i) {
      const auto rec = next();
      if (records[n_phrase + i].kind != kKindToken || records[n_phrase + i].aux != i) {
        throw ParseError("token record " + std::to_string(i) + " is malformed", lineno);
      }
      t.token_strings_.push_back(rec.at("token").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("sidecar line " + std::to_string(lineno) + ": " + e.what(), lineno);
  }
  t.rebuild_source_index();
  return t;
}

// ---------------------------------------------------------------------------
// search

std::vector<float> to_query(const nn::Vec& v) {
  std::vector<float> q(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) q[static_cast<std::size_t>(i)] = static_cast<float>(v(i));
  return q;
}

double dot_score(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

std::vector<SearchHit> search_exact(const PhraseTable& table, std::span<const float> query, std::size_t k) {
  if (query.size() != table.dim()) throw Error("query dimension does not match the phrase table");
  std::vector<SearchHit> hits(table.size());
  for (std::size_t i = 0; i < table.size(); ++i) hits[i] = {i, dot_score(query, table.embedding(i))};
  return top_k(std::move(hits), k);
}

IvfIndex IvfIndex::build(const PhraseTable& table, std::size_t nlist, std::uint64_t seed, std::size_t iterations) {
  const std::size_t n = table.size();
  const std::size_t d = table.dim();
  if (nlist < 1 || nlist > n) {
    throw ConfigError("nlist (" + std::to_string(nlist) + ") must be in [1, " + std::to_string(n) + "]");
  }
  IvfIndex idx;
  idx.dim_ = d;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<double> cent(nlist * d);
  const auto normalize = [&](std::size_t c) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += cent[c * d + j] * cent[c * d + j];
    norm = std::sqrt(norm);
    if (norm > 0) for (std::size_t j = 0; j < d; ++j) cent[c * d + j] /= norm;
  };
  const auto seed_from = [&](std::size_t c, std::size_t entry) {
    const auto e = table.embedding(entry);
    for (std::size_t j = 0; j < d; ++j) cent[c * d + j] = e[j];
    normalize(c);
  };
  for (std::size_t c = 0; c < nlist; ++c) seed_from(c, order[c]);

  std::vector<std::size_t> assign(n, 0);
  std::vector<float> centf(nlist * d);
  const auto assign_all = [&] {
    for (std::size_t j = 0; j < centf.size(); ++j) centf[j] = static_cast<float>(cent[j]);
    for (std::size_t i = 0; i < n; ++i) {
      const auto e = table.embedding(i);
      std::size_t best = 0;
      double best_s = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < nlist; ++c) {
        const double s = dot_score(e, {centf.data() + c * d, d});
        if (s > best_s) {
          best_s = s;
          best = c;
        }
      }
      assign[i] = best;
    }
  };
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (std::size_t it = 0; it < iterations; ++it) {
    assign_all();
    std::fill(cent.begin(), cent.end(), 0.0);
    std::vector<std::size_t> counts(nlist, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto e = table.embedding(i);
      for (std::size_t j = 0; j < d; ++j) cent[assign[i] * d + j] += e[j];
      ++counts[assign[i]];
    }
    for (std::size_t c = 0; c < nlist; ++c) {
      if (counts[c] == 0) seed_from(c, pick(rng));
      else normalize(c);
    }
  }
  assign_all();
  idx.centroids_ = centf;
  idx.lists_.assign(nlist, {});
  for (std::size_t i = 0; i < n; ++i) idx.lists_[assign[i]].push_back(i);
  return idx;
}

std::vector<SearchHit> IvfIndex::search(const PhraseTable& table, std::span<const float> query, std::size_t k,
                                        std::size_t nprobe) const {
  if (query.size() != dim_) throw Error("query dimension does not match the index");
  if (nprobe < 1 || nprobe > nlist()) {
    throw ConfigError("nprobe must be in [1, " + std::to_string(nlist()) + "]");
  }
  std::vector<SearchHit> cells(nlist());
  for (std::size_t c = 0; c < nlist(); ++c) cells[c] = {c, dot_score(query, {centroids_.data() + c * dim_, dim_})};
  cells = top_k(std::move(cells), nprobe);
  std::vector<SearchHit> hits;
  for (const auto& cell : cells) {
    for (std::size_t id : lists_[cell.entry_id]) hits.push_back({id, dot_score(query, table.embedding(id))});
  }
  return top_k(std::move(hits), k);
}

// ---------------------------------------------------------------------------

PhraseTable merge_tables(const PhraseTable& a, const PhraseTable& b, bool allow_encoder_mismatch) {
  if (a.dim_ != b.dim_) {
    throw Error("cannot merge tables of dimension " + std::to_string(a.dim_) + " and " + std::to_string(b.dim_));
  }
  if (!allow_encoder_mismatch && a.provenance_.encoder_checksum != b.provenance_.encoder_checksum) {
    throw Error("phrase encoder checksum mismatch between merged tables (override required)");
  }
  PhraseTable t;
  t.dim_ = a.dim_;
  t.phrases_ = a.phrases_;
  t.phrases_.insert(t.phrases_.end(), b.phrases_.begin(), b.phrases_.end());
  t.token_strings_ = a.token_strings_;
  const auto pa = a.phrase_count() * a.dim_;
  const auto pb = b.phrase_count() * b.dim_;
  t.embeddings_.reserve(pa + pb + a.token_count() * a.dim_);
  t.embeddings_.insert(t.embeddings_.end(), a.embeddings_.begin(), a.embeddings_.begin() + static_cast<std::ptrdiff_t>(pa));
  t.embeddings_.insert(t.embeddings_.end(), b.embeddings_.begin(), b.embeddings_.begin() + static_cast<std::ptrdiff_t>(pb));
  t.embeddings_.insert(t.embeddings_.end(), a.embeddings_.begin() + static_cast<std::ptrdiff_t>(pa), a.embeddings_.end());
  t.provenance_ = a.provenance_;
  if (!b.provenance_.corpus_id.empty()) t.provenance_.corpus_id += "+" + b.provenance_.corpus_id;
  t.rebuild_source_index();
  return t;
}

std::vector<std::size_t> attribution_failures(const PhraseTable& table, const DocumentStore& store) {
  std::vector<std::size_t> bad;
  for (std::size_t i = 0; i < table.phrase_count(); ++i) {
    const auto& e = table.phrase(i);
    const Document* doc = store.find(e.source.doc_id);
    if (!doc || e.source.end > doc->tokens.size() || e.source.start >= e.source.end ||
        !std::equal(e.tokens.begin(), e.tokens.end(), doc->tokens.begin() + static_cast<std::ptrdiff_t>(e.source.start),
                    doc->tokens.begin() + static_cast<std::ptrdiff_t>(e.source.end))) {
      bad.push_back(i);
    }
  }
  return bad;
}

double recall_at_k(const std::vector<SearchHit>& exact, const std::vector<SearchHit>& approx) {
  if (exact.empty()) return 1.0;
  std::unordered_set<std::size_t> want;
  for (const auto& h : exact) want.insert(h.entry_id);
  std::size_t found = 0;
  for (const auto& h : approx) found += want.count(h.entry_id);
  return static_cast<double>(found) / static_cast<double>(exact.size());
}

}  // namespace phrase_lm

namespace phrase_lm {

SurfaceGroups group_entries_by_surface(const PhraseTable& table) {
  SurfaceGroups groups;
  for (std::size_t i = 0; i < table.phrase_count(); ++i) groups[table.phrase(i).tokens].push_back(i);
  return groups;
}

}  // namespace phrase_lm
