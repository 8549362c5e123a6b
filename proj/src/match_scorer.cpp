#include "phrase_lm/match_scorer.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>
#include <unordered_map>
#include <unordered_set>

namespace phrase_lm {

namespace {

bool source_less(const SourceSpan& a, const SourceSpan& b) {
  return std::tie(a.doc_id, a.start, a.end) < std::tie(b.doc_id, b.start, b.end);
}

}  // namespace

std::vector<ScoredOccurrence> bm25_topn(std::span<const TokenId> query, const std::vector<Occurrence>& group,
                                        std::size_t n, const Bm25Params& params) {
  std::vector<ScoredOccurrence> out;
  if (group.empty()) return out;
  const double N = static_cast<double>(group.size());
  double avgdl = 0.0;
  for (const auto& o : group) avgdl += static_cast<double>(o.context.size());
  avgdl /= N;

  const std::unordered_set<TokenId> terms(query.begin(), query.end());
  std::vector<std::unordered_map<TokenId, std::size_t>> tf(group.size());
  std::unordered_map<TokenId, std::size_t> df;
  for (std::size_t i = 0; i < group.size(); ++i) {
    for (TokenId t : group[i].context) {
      if (terms.count(t) && tf[i][t]++ == 0) ++df[t];
    }
  }
  for (std::size_t i = 0; i < group.size(); ++i) {
    const double len_norm = avgdl > 0 ? static_cast<double>(group[i].context.size()) / avgdl : 0.0;
    double score = 0.0;
    for (const auto& [t, f] : tf[i]) {
      const double d = static_cast<double>(df[t]);
      const double idf = std::log((N - d + 0.5) / (d + 0.5) + 1.0);
      const double fd = static_cast<double>(f);
      score += idf * fd * (params.k1 + 1.0) / (fd + params.k1 * (1.0 - params.b + params.b * len_norm));
    }
    out.push_back({i, score});
  }
  std::sort(out.begin(), out.end(), [&](const ScoredOccurrence& a, const ScoredOccurrence& b) {
    if (a.score != b.score) return a.score > b.score;
    return source_less(group[a.index].span, group[b.index].span);
  });
  if (out.size() > n) out.resize(n);
  return out;
}

double semantic_sim(std::span<const float> a, std::span<const float> b) { return dot_score(a, b); }

std::optional<MatchScore> best_source(const Occurrence& train, const std::vector<Occurrence>& group,
                                      std::size_t shortlist, const Bm25Params& params) {
  std::vector<Occurrence> eligible;
  std::vector<std::size_t> origin;
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (group[i].span.doc_id == train.span.doc_id) continue;
    eligible.push_back(group[i]);
    origin.push_back(i);
  }
  if (eligible.empty()) return std::nullopt;
  std::optional<MatchScore> best;
  for (const auto& s : bm25_topn(train.context, eligible, shortlist, params)) {
    const double sem = semantic_sim(train.embedding, eligible[s.index].embedding);
    const bool better = !best || sem > best->semantic ||
                        (sem == best->semantic && source_less(eligible[s.index].span, group[best->index].span));
    if (better) best = MatchScore{origin[s.index], s.score, sem};
  }
  return best;
}

}  // namespace phrase_lm
