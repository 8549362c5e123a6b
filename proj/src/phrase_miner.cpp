#include "phrase_lm/phrase_miner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <tuple>
#include <unordered_set>

#include <json.hpp>

#include "phrase_lm/error.hpp"

namespace phrase_lm {

std::size_t SurfaceHash::operator()(const Surface& s) const noexcept {
  std::size_t h = 0xcbf29ce484222325ULL;
  for (TokenId t : s) {
    h ^= t;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::string span_desc(const std::string& doc, std::size_t start, std::size_t end) {
  return "span (" + std::to_string(start) + "," + std::to_string(end) + ") of document '" + doc + "'";
}

bool passes_shape(const ConstituentSpan& s, const FilterConfig& cfg) {
  return !cfg.drop_labels.count(s.label) && s.size() >= cfg.min_words && s.size() <= cfg.max_words;
}

}  // namespace

std::vector<ConstituentSpan> load_spans(std::istream& in, const DocumentStore& store) {
  std::vector<ConstituentSpan> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = "spans line " + std::to_string(lineno) + ": ";
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + e.what(), lineno);
    }
    if (!rec.is_object() || !rec.contains("doc_id") || !rec["doc_id"].is_string() || !rec.contains("spans") ||
        !rec["spans"].is_array()) {
      throw ParseError(where + "expected \"doc_id\" and \"spans\"", lineno);
    }
    const auto doc_id = rec["doc_id"].get<std::string>();
    const Document* doc = store.find(doc_id);
    if (!doc) throw Error(where + "unknown document '" + doc_id + "'");
    for (const auto& s : rec["spans"]) {
      if (!s.is_object() || !s.contains("start") || !s.contains("end") || !s["start"].is_number_integer() ||
          !s["end"].is_number_integer()) {
        throw ParseError(where + "span needs integer \"start\" and \"end\"", lineno);
      }
      const auto start = s["start"].get<long long>();
      const auto end = s["end"].get<long long>();
      if (start < 0 || end <= start) {
        throw Error(where + "invalid " + span_desc(doc_id, static_cast<std::size_t>(std::max(0LL, start)),
                                                    static_cast<std::size_t>(std::max(0LL, end))));
      }
      if (static_cast<std::size_t>(end) > doc->tokens.size()) {
        throw Error(where + span_desc(doc_id, start, end) + " exceeds document length " +
                    std::to_string(doc->tokens.size()));
      }
      ConstituentSpan span{doc_id, static_cast<std::size_t>(start), static_cast<std::size_t>(end),
                           s.value("label", std::string{})};
      out.push_back(std::move(span));
    }
  }
  return out;
}

std::vector<ConstituentSpan> load_spans(const std::filesystem::path& path, const DocumentStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read spans " + path.string());
  return load_spans(in, store);
}

std::vector<ConstituentSpan> fallback_chunk(const Document& doc, const TokenVocab& vocab, std::size_t min_len,
                                            std::size_t max_len) {
  std::vector<ConstituentSpan> out;
  for (const auto& block : doc.blocks) {
    for (std::size_t start = block.start; start < block.end; ++start) {
      for (std::size_t end = start + 1; end <= block.end && end - start <= max_len; ++end) {
        if (is_punctuation_token(vocab.str(doc.tokens[end - 1]))) break;
        if (end - start >= min_len) out.push_back({doc.id, start, end, kFallbackLabel});
      }
    }
  }
  return out;
}

std::size_t IdfTable::df(const Surface& s) const {
  auto it = doc_freq_.find(s);
  return it == doc_freq_.end() ? 0 : it->second;
}

std::optional<double> IdfTable::idf(const Surface& s) const {
  const std::size_t d = df(s);
  if (d == 0 || block_count_ == 0) return std::nullopt;
  return std::log(static_cast<double>(block_count_) / static_cast<double>(d));
}

IdfTable compute_idf(const DocumentStore& store, const std::vector<Surface>& surfaces) {
  IdfTable table(store.block_count());
  std::unordered_set<Surface, SurfaceHash> wanted;
  std::set<std::size_t> lengths;
  for (const auto& s : surfaces) {
    if (s.empty()) continue;
    wanted.insert(s);
    lengths.insert(s.size());
    table.set_df(s, 0);
  }
  std::unordered_map<Surface, std::size_t, SurfaceHash> counts;
  std::unordered_set<Surface, SurfaceHash> seen;
  Surface window;
  for (const auto& doc : store) {
    for (const auto& block : doc.blocks) {
      seen.clear();
      for (std::size_t n : lengths) {
        if (n > block.size()) break;
        for (std::size_t i = block.start; i + n <= block.end; ++i) {
          window.assign(doc.tokens.begin() + static_cast<std::ptrdiff_t>(i),
                        doc.tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
          if (wanted.count(window) && seen.insert(window).second) ++counts[window];
        }
      }
    }
  }
  for (const auto& [s, c] : counts) table.set_df(s, c);
  return table;
}

IdfThresholds default_idf_thresholds() {
  return {{2, {10.50, 14.08}}, {3, {11.09, 14.08}}, {4, {11.77, 14.30}},
          {5, {12.10, 14.30}}, {6, {12.32, 14.30}}, {7, {12.51, 14.59}},
          {8, {12.59, 14.59}}, {9, {12.64, 14.59}}, {10, {12.69, 14.59}}};
}

const std::set<std::string>& default_drop_labels() {
  static const std::set<std::string> labels = {
      "X",   "PRT",  "CC",     "DT",     "EX",   "FRAG", "GW",  "HYPH", "IN",    "INTJ",  "LS", "LST",
      "MD",  "NFP",  "NML",    "PDT",    "POS",  "PP",   "PRP", "PRP$", "PPZ",   "RB",    "RBR", "RBS",
      "RP",  "S",    "SYM",    "TO",     "WDT",  "WHADJP", "WHADVP", "WHNP", "WHPP", "WP", "WP$", "WRB",
      "#",   "$",    "\"",     "``",     "-LRB-", "-RRB-", ",",  ".",    ":"};
  return labels;
}

IdfThresholds uniform_idf_thresholds(double min, double max, std::size_t min_words, std::size_t max_words) {
  IdfThresholds t;
  for (std::size_t n = min_words; n <= max_words; ++n) t[n] = {min, max};
  return t;
}

Surface span_tokens(const DocumentStore& store, const ConstituentSpan& span) {
  const Document* doc = store.find(span.doc_id);
  if (!doc) throw Error("unknown document '" + span.doc_id + "'");
  if (span.end > doc->tokens.size() || span.start >= span.end) {
    throw Error("invalid " + span_desc(span.doc_id, span.start, span.end));
  }
  return Surface(doc->tokens.begin() + static_cast<std::ptrdiff_t>(span.start),
                 doc->tokens.begin() + static_cast<std::ptrdiff_t>(span.end));
}

std::vector<Surface> span_surfaces(const std::vector<ConstituentSpan>& spans, const DocumentStore& store,
                                   const FilterConfig& cfg) {
  std::unordered_set<Surface, SurfaceHash> unique;
  std::vector<Surface> out;
  for (const auto& s : spans) {
    if (!passes_shape(s, cfg)) continue;
    auto toks = span_tokens(store, s);
    if (unique.insert(toks).second) out.push_back(std::move(toks));
  }
  return out;
}

std::vector<PhraseCandidate> filter_candidates(const std::vector<ConstituentSpan>& spans, const DocumentStore& store,
                                               const TokenVocab& vocab, const IdfTable& idf,
                                               const FilterConfig& cfg) {
  std::vector<PhraseCandidate> out;
  for (const auto& s : spans) {
    if (!passes_shape(s, cfg)) continue;
    auto band = cfg.thresholds.find(s.size());
    if (band == cfg.thresholds.end()) continue;
    auto toks = span_tokens(store, s);
    auto value = idf.idf(toks);
    if (!value || *value < band->second.min || *value > band->second.max) continue;
    PhraseCandidate c;
    c.span = s;
    c.surface = detokenize(toks, vocab);
    c.tokens = std::move(toks);
    c.word_count = s.size();
    c.idf = *value;
    out.push_back(std::move(c));
  }
  std::sort(out.begin(), out.end(), [](const PhraseCandidate& a, const PhraseCandidate& b) {
    return std::tie(a.span.doc_id, a.span.start, a.span.end, a.span.label) <
           std::tie(b.span.doc_id, b.span.start, b.span.end, b.span.label);
  });
  return out;
}

IdfThresholds percentile_idf_thresholds(const std::vector<ConstituentSpan>& spans, const DocumentStore& store,
                                        const IdfTable& idf, const FilterConfig& cfg, double low_q, double high_q) {
  if (low_q < 0 || high_q < 0 || low_q + high_q >= 1.0) {
    throw ConfigError("percentile bounds must be non-negative and sum below 1");
  }
  std::map<std::size_t, std::vector<double>> by_len;
  for (const auto& s : spans) {
    if (!passes_shape(s, cfg)) continue;
    if (auto v = idf.idf(span_tokens(store, s))) by_len[s.size()].push_back(*v);
  }
  IdfThresholds out;
  for (auto& [len, values] : by_len) {
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    const auto lo = static_cast<std::size_t>(std::ceil(low_q * static_cast<double>(n)));
    const auto hi_drop = static_cast<std::size_t>(std::ceil(high_q * static_cast<double>(n)));
    if (lo + hi_drop >= n) continue;
    out[len] = {values[lo], values[n - 1 - hi_drop]};
  }
  return out;
}

std::map<std::string, std::vector<PhraseCandidate>> group_lexical(const std::vector<PhraseCandidate>& candidates) {
  std::map<std::string, std::vector<PhraseCandidate>> groups;
  for (const auto& c : candidates) groups[c.surface].push_back(c);
  return groups;
}

}  // namespace phrase_lm
