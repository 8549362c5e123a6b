#pragma once

// Automatic text metrics and the decode-latency benchmark.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "phrase_lm/generator.hpp"

namespace phrase_lm {

struct RepN {
  double value = 0.0;      // percentage
  bool too_short = false;  // fewer than n tokens; value reported as 0
};

/// 100 * (1 - unique n-grams / total n-grams) over the tokens.
RepN rep_n(std::span<const std::string> tokens, std::size_t n);

struct Diversity {
  double value = 0.0;
  double rep[3] = {0, 0, 0};  // rep-2, rep-3, rep-4
  bool too_short = false;
};

/// prod_{n=2..4} (1 - rep_n / 100).
Diversity diversity(std::span<const std::string> tokens);
/// Same, after splitting `text` with the corpus tokenizer.
Diversity diversity(std::string_view text);

/// log p(x_i | prefix ++ x_<i) of each continuation token under the model's
/// next-token head.
std::vector<double> token_log_probs(std::span<const TokenId> prefix, std::span<const TokenId> continuation,
                                    const nn::Model& model);

/// Negative mean of the given per-token log-probabilities.
double coherence_from_log_probs(std::span<const double> log_probs);
double coherence(std::span<const TokenId> prefix, std::span<const TokenId> continuation, const nn::Model& model);

struct BenchRun {
  double seconds = 0.0;
  double token_rate = 0.0;
  std::size_t decode_steps = 0;
  std::size_t tokens = 0;
  std::size_t phrase_extra = 0;  // sum over phrase steps of (length - 1)
  double diversity = 0.0;
};

struct BenchReport {
  std::vector<BenchRun> runs;
  double mean_seconds = 0.0;
  double p50_seconds = 0.0;
  double p95_seconds = 0.0;
  double mean_token_rate = 0.0;
  double mean_diversity = 0.0;
  double mean_decode_steps = 0.0;
};

/// Times one generation per prefix, serially, after `warmup` untimed runs.
BenchReport bench_decode(const std::vector<std::vector<TokenId>>& prefixes, const nn::Model& model,
                         const PhraseTable& table, const TokenVocab& vocab, const GenerationConfig& cfg,
                         std::size_t warmup = 1);

struct SweepRow {
  double phi = 0.0;
  BenchReport report;
};

std::vector<SweepRow> phi_sweep(const std::vector<std::vector<TokenId>>& prefixes, const nn::Model& model,
                                const PhraseTable& table, const TokenVocab& vocab, GenerationConfig cfg,
                                const std::vector<double>& phis, std::size_t warmup = 1);

/// Plain-text table: phi, token rate, mean latency, diversity.
std::string format_sweep(const std::vector<SweepRow>& rows);

}  // namespace phrase_lm
