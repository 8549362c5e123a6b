#include "phrase_lm/evalsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>

#include "phrase_lm/error.hpp"

namespace phrase_lm {

RepN rep_n(std::span<const std::string> tokens, std::size_t n) {
  if (n == 0) throw Error("rep-n needs n >= 1");
  RepN r;
  if (tokens.size() < n) {
    r.too_short = true;
    return r;
  }
  std::set<std::vector<std::string>> unique;
  const std::size_t total = tokens.size() - n + 1;
  for (std::size_t i = 0; i < total; ++i) unique.emplace(tokens.begin() + i, tokens.begin() + i + n);
  r.value = 100.0 * (1.0 - static_cast<double>(unique.size()) / static_cast<double>(total));
  return r;
}

Diversity diversity(std::span<const std::string> tokens) {
  Diversity d;
  d.value = 1.0;
  for (std::size_t n = 2; n <= 4; ++n) {
    const auto r = rep_n(tokens, n);
    d.rep[n - 2] = r.value;
    d.too_short = d.too_short || r.too_short;
    d.value *= 1.0 - r.value / 100.0;
  }
  return d;
}

Diversity diversity(std::string_view text) {
  const auto toks = split_tokens(text);
  return diversity(std::span<const std::string>(toks));
}

std::vector<double> token_log_probs(std::span<const TokenId> prefix, std::span<const TokenId> continuation,
                                    const nn::Model& model) {
  std::vector<TokenId> context(prefix.begin(), prefix.end());
  context.insert(context.end(), continuation.begin(), continuation.end());
  const nn::Mat Q = model.encode_prefixes(context);
  const auto& E = model.trainable().token_embed;
  std::vector<double> out;
  out.reserve(continuation.size());
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const nn::Vec logits = E * Q.row(static_cast<Eigen::Index>(prefix.size() + i)).transpose();
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    out.push_back(logits(continuation[i]) - lse);
  }
  return out;
}

double coherence_from_log_probs(std::span<const double> log_probs) {
  if (log_probs.empty()) throw Error("coherence of an empty continuation is undefined");
  double s = 0.0;
  for (double v : log_probs) s += v;
  return -s / static_cast<double>(log_probs.size());
}

double coherence(std::span<const TokenId> prefix, std::span<const TokenId> continuation, const nn::Model& model) {
  if (continuation.empty()) throw Error("coherence of an empty continuation is undefined");
  const auto lp = token_log_probs(prefix, continuation, model);
  return coherence_from_log_probs(lp);
}

namespace {

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(v.size() - 1, lo + 1);
  return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

}  // namespace

BenchReport bench_decode(const std::vector<std::vector<TokenId>>& prefixes, const nn::Model& model,
                         const PhraseTable& table, const TokenVocab& vocab, const GenerationConfig& cfg,
                         std::size_t warmup) {
  BenchReport rep;
  for (std::size_t i = 0; i < warmup && !prefixes.empty(); ++i) {
    generate(prefixes[i % prefixes.size()], model, table, vocab, cfg);
  }
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    GenerationConfig c = cfg;
    c.seed = cfg.seed + i;
    const auto t0 = std::chrono::steady_clock::now();
    const auto rec = generate(prefixes[i], model, table, vocab, c);
    const auto t1 = std::chrono::steady_clock::now();
    BenchRun run;
    run.seconds = std::chrono::duration<double>(t1 - t0).count();
    run.token_rate = rec.token_rate;
    run.decode_steps = rec.decode_steps();
    run.tokens = rec.tokens.size();
    for (const auto& s : rec.steps) {
      if (s.kind == StepKind::kPhrase) run.phrase_extra += s.length - 1;
    }
    std::vector<std::string> toks;
    for (TokenId t : rec.tokens) toks.push_back(vocab.str(t));
    run.diversity = diversity(std::span<const std::string>(toks)).value;
    rep.runs.push_back(run);
  }
  if (!rep.runs.empty()) {
    std::vector<double> secs;
    for (const auto& r : rep.runs) {
      secs.push_back(r.seconds);
      rep.mean_seconds += r.seconds;
      rep.mean_token_rate += r.token_rate;
      rep.mean_diversity += r.diversity;
      rep.mean_decode_steps += static_cast<double>(r.decode_steps);
    }
    const auto n = static_cast<double>(rep.runs.size());
    rep.mean_seconds /= n;
    rep.mean_token_rate /= n;
    rep.mean_diversity /= n;
    rep.mean_decode_steps /= n;
    rep.p50_seconds = percentile(secs, 0.5);
    rep.p95_seconds = percentile(secs, 0.95);
  }
  return rep;
}

std::vector<SweepRow> phi_sweep(const std::vector<std::vector<TokenId>>& prefixes, const nn::Model& model,
                                const PhraseTable& table, const TokenVocab& vocab, GenerationConfig cfg,
                                const std::vector<double>& phis, std::size_t warmup) {
  std::vector<SweepRow> rows;
  for (double phi : phis) {
    cfg.phi = phi;
    rows.push_back({phi, bench_decode(prefixes, model, table, vocab, cfg, warmup)});
  }
  return rows;
}

std::string format_sweep(const std::vector<SweepRow>& rows) {
  std::string out = "phi    token_rate  steps    latency_ms  diversity\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-6.2f %-11.4f %-8.1f %-11.3f %.4f\n", r.phi, r.report.mean_token_rate,
                  r.report.mean_decode_steps, r.report.mean_seconds * 1e3, r.report.mean_diversity);
    out += buf;
  }
  return out;
}

}  // namespace phrase_lm
