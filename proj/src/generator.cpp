#include "phrase_lm/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "phrase_lm/error.hpp"
#include "phrase_lm/parallel.hpp"

namespace phrase_lm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// Softmax over (entry, score) pairs followed by the phrase filter.
CandidateDistribution softmax_filter(const PhraseTable& table, const std::vector<SearchHit>& hits, double phi) {
  CandidateDistribution out;
  if (hits.empty()) return out;
  double mx = kNegInf;
  for (const auto& h : hits) mx = std::max(mx, h.score);
  double z = 0.0;
  for (const auto& h : hits) z += std::exp(h.score - mx);
  std::vector<Candidate> all;
  all.reserve(hits.size());
  for (const auto& h : hits) {
    const double p = std::exp(h.score - mx) / z;
    if (p > 0.0) all.push_back({h.entry_id, p, !table.is_token(h.entry_id)});
  }
  std::vector<Candidate> kept;
  for (const auto& c : all) {
    if (!c.phrase || c.probability >= phi) kept.push_back(c);
  }
  if (kept.empty()) {
    kept = std::move(all);
    out.fell_back = true;
  }
  double mass = 0.0;
  for (const auto& c : kept) mass += c.probability;
  for (auto& c : kept) c.probability /= mass;
  out.candidates = std::move(kept);
  return out;
}

}  // namespace

void GenerationConfig::validate() const {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (!(phi >= 0.0 && phi <= 1.0)) throw ConfigError("phrase threshold must lie in [0, 1]");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  if (ivf && (nprobe < 1 || nprobe > ivf->nlist())) throw ConfigError("nprobe must lie in [1, nlist]");
}

CandidateDistribution filtered_softmax(const PhraseTable& table, const std::vector<SearchHit>& hits, double phi) {
  return softmax_filter(table, hits, phi);
}

std::vector<SearchHit> retrieve(const PhraseTable& table, std::span<const float> query, const GenerationConfig& cfg) {
  if (cfg.ivf) return cfg.ivf->search(table, query, cfg.k, cfg.nprobe);
  return search_exact(table, query, cfg.k);
}

CandidateDistribution next_distribution(const nn::Vec& query, const PhraseTable& table, const GenerationConfig& cfg) {
  return softmax_filter(table, retrieve(table, to_query(query), cfg), cfg.phi);
}

CandidateDistribution next_distribution(std::span<const TokenId> prefix, const nn::Model& model,
                                        const PhraseTable& table, const GenerationConfig& cfg) {
  return next_distribution(model.encode_prefix(prefix), table, cfg);
}

std::size_t sample_top_p(const CandidateDistribution& dist, double p, std::mt19937_64& rng) {
  if (dist.candidates.empty()) throw Error("cannot sample from an empty distribution");
  std::vector<std::size_t> order(dist.candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = dist.candidates[a];
    const auto& y = dist.candidates[b];
    if (x.probability != y.probability) return x.probability > y.probability;
    return x.entry < y.entry;
  });
  std::size_t cut = 0;
  double mass = 0.0;
  while (cut < order.size()) {
    mass += dist.candidates[order[cut]].probability;
    ++cut;
    if (mass >= p - 1e-12) break;
  }
  // 53-bit uniform in [0, 1), independent of the standard library's distributions
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * mass;
  double acc = 0.0;
  for (std::size_t i = 0; i < cut; ++i) {
    acc += dist.candidates[order[i]].probability;
    if (u < acc) return order[i];
  }
  return order[cut - 1];
}

GenerationRecord generate(std::span<const TokenId> prefix, const nn::Model& model, const PhraseTable& table,
                          const TokenVocab& vocab, const GenerationConfig& cfg) {
  cfg.validate();
  GenerationRecord rec;
  if (cfg.max_new_tokens == 0) return rec;
  std::mt19937_64 rng(cfg.seed);
  auto state = model.start_prefix(prefix);
  std::size_t token_step_tokens = 0;
  std::vector<std::string> surfaces;
  while (rec.tokens.size() < cfg.max_new_tokens) {
    const auto dist = next_distribution(state.query, table, cfg);
    const auto& c = dist.candidates[sample_top_p(dist, cfg.top_p, rng)];
    const auto surf = table.surface_tokens(c.entry);
    const std::size_t m = std::min(surf.size(), cfg.max_new_tokens - rec.tokens.size());
    const auto emitted = surf.first(m);

    GenerationStep step;
    step.entry = c.entry;
    step.length = m;
    step.probability = c.probability;
    step.surface = detokenize(emitted, vocab);
    if (table.is_token(c.entry)) {
      step.kind = StepKind::kToken;
      step.token_id = table.token_of(c.entry);
      token_step_tokens += m;
    } else {
      step.kind = StepKind::kPhrase;
      SourceSpan src = table.phrase(c.entry).source;
      src.end = src.start + m;
      step.source = std::move(src);
    }
    rec.tokens.insert(rec.tokens.end(), emitted.begin(), emitted.end());
    surfaces.push_back(step.surface);
    rec.steps.push_back(std::move(step));
    if (rec.tokens.size() < cfg.max_new_tokens) model.extend_prefix(state, emitted);
  }
  for (std::size_t i = 0; i < surfaces.size(); ++i) {
    if (i) rec.text += ' ';
    rec.text += surfaces[i];
  }
  rec.token_rate = static_cast<double>(token_step_tokens) / static_cast<double>(rec.tokens.size());
  return rec;
}

// ---- likelihood ----

double lattice_log_likelihood(std::size_t n, const std::function<std::vector<LatticeArc>(std::size_t)>& arcs) {
  std::vector<double> L(n + 1, kNegInf);
  L[0] = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (L[j] == kNegInf) continue;
    for (const auto& a : arcs(j)) {
      if (a.length == 0 || j + a.length > n) continue;
      L[j + a.length] = log_add(L[j + a.length], L[j] + a.log_prob);
    }
  }
  return L[n];
}

CandidateDistribution likelihood_distribution(const nn::Vec& query, const PhraseTable& table,
                                              const GenerationConfig& cfg) {
  const auto q = to_query(query);
  auto hits = retrieve(table, q, cfg);
  if (cfg.dp_topk_only) return softmax_filter(table, hits, cfg.phi);
  std::erase_if(hits, [&](const SearchHit& h) { return table.is_token(h.entry_id); });
  hits.reserve(hits.size() + table.token_count());
  for (std::size_t t = 0; t < table.token_count(); ++t) {
    const std::size_t id = table.phrase_count() + t;
    hits.push_back({id, dot_score(q, table.embedding(id))});
  }
  return softmax_filter(table, hits, cfg.phi);
}

double dp_likelihood(std::span<const TokenId> text, std::span<const TokenId> prefix, const nn::Model& model,
                     const PhraseTable& table, const GenerationConfig& cfg, DpStats* stats) {
  cfg.validate();
  if (text.empty()) throw Error("likelihood of an empty text is undefined");
  std::vector<TokenId> context(prefix.begin(), prefix.end());
  context.insert(context.end(), text.begin(), text.end());
  const nn::Mat Q = model.encode_prefixes(context);
  const std::size_t n = text.size();
  return lattice_log_likelihood(n, [&](std::size_t j) {
    if (stats) ++stats->distributions;
    const nn::Vec q = Q.row(static_cast<Eigen::Index>(prefix.size() + j)).transpose();
    const auto dist = likelihood_distribution(q, table, cfg);
    std::map<std::size_t, double> by_len;
    const auto rest = text.subspan(j);
    for (const auto& c : dist.candidates) {
      const auto s = table.surface_tokens(c.entry);
      if (s.size() > rest.size() || !std::equal(s.begin(), s.end(), rest.begin())) continue;
      auto [it, fresh] = by_len.emplace(s.size(), c.probability);
      if (!fresh) it->second = cfg.dp_max_identical ? std::max(it->second, c.probability) : it->second + c.probability;
    }
    std::vector<LatticeArc> arcs;
    for (const auto& [len, p] : by_len) arcs.push_back({len, std::log(p)});
    return arcs;
  });
}

OptionScores score_options(std::span<const TokenId> question, const std::vector<std::vector<TokenId>>& options,
                           const nn::Model& model, const PhraseTable& table, const GenerationConfig& cfg) {
  if (options.size() < 2) throw Error("option scoring needs at least two options");
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (options[i].empty()) throw Error("option " + std::to_string(i) + " is empty");
  }
  OptionScores out;
  out.scores.resize(options.size());
  parallel_for(options.size(), cfg.threads, [&](std::size_t i) {
    std::vector<TokenId> text(question.begin(), question.end());
    text.insert(text.end(), options[i].begin(), options[i].end());
    double s = dp_likelihood(text, {}, model, table, cfg);
    if (cfg.normalize_options) s /= static_cast<double>(text.size());
    out.scores[i] = s;
  });
  for (std::size_t i = 1; i < options.size(); ++i) {
    if (out.scores[i] > out.scores[out.chosen]) out.chosen = i;
  }
  return out;
}

}  // namespace phrase_lm
