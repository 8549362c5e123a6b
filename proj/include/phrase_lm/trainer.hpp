#pragma once

// Contrastive (InfoNCE) + next-token training of the prefix encoder and token
// embeddings, negative mining, and the self-reinforcement loop that lets the
// model re-target its own oracle paths.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "phrase_lm/corpus.hpp"
#include "phrase_lm/neural.hpp"
#include "phrase_lm/oracle.hpp"
#include "phrase_lm/phrase_index.hpp"

namespace phrase_lm {

enum class SrScore {
  kModel,   // prefix . phrase retrieval score of the current model
  kFrozen,  // frozen phrase-encoder similarity to the training span
};

struct TrainConfig {
  double alpha = 1.0;
  /// Documents per batch; every oracle step of those documents is an example.
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t hard_negatives_per_example = 8;
  std::size_t sr_rounds = 2;
  std::size_t sr_k = 128;
  SrScore sr_score = SrScore::kModel;
  SegmentRule segment_rule = SegmentRule::kScoreGreedy;
  /// Also use other examples' hard negatives as in-batch negatives.
  bool in_batch_includes_hard = false;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const;
};

// ---- losses ----

struct InfoNceResult {
  double loss = 0.0;
  nn::Vec d_query;
  nn::Vec d_positive;
  std::vector<nn::Vec> d_negatives;
};

/// -log(exp(q.s) / (exp(q.s) + sum_t exp(q.t))), max-subtracted.
InfoNceResult infonce_loss(const nn::Vec& query, const nn::Vec& positive, const std::vector<nn::Vec>& negatives);

struct TokenLossResult {
  double loss = 0.0;
  nn::Vec d_query;
  nn::Mat d_embed;  // V x d
};

/// Cross-entropy of softmax(E q) against `target`.
TokenLossResult token_loss(const nn::Vec& query, TokenId target, const nn::Mat& token_embed);

inline double combined_loss(double phrase_loss, double token_loss_value, double alpha) {
  return phrase_loss + alpha * token_loss_value;
}

// ---- negatives ----

struct NegativeSet {
  std::vector<std::size_t> in_batch;
  std::vector<std::size_t> hard;
};

/// True when the entry's surface is a token-aligned prefix of `continuation`.
bool is_continuation_prefix(const PhraseTable& table, std::size_t entry, std::span<const TokenId> continuation);

/// In-batch: other examples' targets; hard: up to `hard_count` entries sampled
/// from `last_topk` minus the target. Both exclude the target and anything that
/// is a prefix of the ground-truth continuation. Sorted ascending.
NegativeSet mine_negatives(std::size_t target, std::span<const TokenId> continuation,
                           const std::vector<std::size_t>& other_targets, const std::vector<std::size_t>& last_topk,
                           const PhraseTable& table, std::size_t hard_count, std::mt19937_64& rng);

// ---- batches ----

/// One causal pass: input = [BOS] + tokens; row r predicts targets[r].
struct TrainSegment {
  std::vector<TokenId> input;
  std::vector<TokenId> targets;
};

struct TrainExample {
  std::size_t segment = 0;
  std::size_t row = 0;
  std::size_t target = 0;  // table entry id
  std::vector<std::size_t> negatives;
};

struct TrainBatch {
  std::vector<TrainSegment> segments;
  std::vector<TrainExample> examples;
};

struct BatchLoss {
  double phrase = 0.0;  // mean InfoNCE over examples
  double token = 0.0;   // mean cross-entropy over positions
  double combined = 0.0;
  std::size_t examples = 0;
  std::size_t positions = 0;
};

/// Loss of a batch with fixed negatives. Token entries are read from the
/// model's token embeddings, phrase entries from the table. When `grads` is
/// given, gradients of the combined loss are accumulated into it.
BatchLoss batch_loss(const nn::Model& model, const PhraseTable& table, const TrainBatch& batch, double alpha,
                     nn::TrainableParams* grads, unsigned threads = 1);

// ---- optimizer ----

class Adam {
 public:
  Adam(const nn::TrainableParams& shape, double beta1, double beta2, double eps);
  void step(nn::TrainableParams& params, const nn::TrainableParams& grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  nn::TrainableParams m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---- self-reinforcement ----

/// Top-k entry ids per (document index, position), from the latest round.
using TopKCache = std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>>;

struct SrStats {
  std::size_t steps_visited = 0;
  std::size_t replaced = 0;
  double update_rate() const { return steps_visited ? static_cast<double>(replaced) / steps_visited : 0.0; }
};

struct SrReplacement {
  std::size_t doc = 0;
  std::size_t position = 0;
  std::size_t entry = 0;
};

/// One pass over all paths. Each step's prefix retrieves the top-k entries;
/// among phrase entries whose surface is a prefix of the remaining text (and
/// whose source lies outside the document) the highest-scoring one becomes the
/// target (ties: longer, then smaller id), and the rest of the path is
/// re-segmented from the original resolved candidates. Otherwise the step is
/// kept. `train_docs[i]` is the text of `paths[i]`.
SrStats self_reinforce_round(std::vector<OraclePath>& paths, const std::vector<const Document*>& train_docs,
                             const std::vector<std::vector<ResolvedCandidate>>& resolved, const PhraseTable& table,
                             const nn::Model& model, const TrainConfig& cfg, TopKCache& cache,
                             std::vector<SrReplacement>* replacements = nullptr);

// ---- training ----

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 = evaluation before any update
  double phrase_loss = 0.0;
  double token_loss = 0.0;
  double combined = 0.0;
  /// Update rate of the SR round that ran after this epoch, or -1.
  double sr_update_rate = -1.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::vector<SrStats> sr_rounds;
};

/// Trains on `paths` (one per entry of `train_docs`). `resolved[i]` holds the
/// candidates used to build paths[i]. SR rounds run after evenly spaced
/// training phases and update `paths`. The table's token rows are refreshed
/// from the model before each SR round and at the end.
TrainResult train(std::vector<OraclePath>& paths, const std::vector<const Document*>& train_docs,
                  const std::vector<std::vector<ResolvedCandidate>>& resolved, PhraseTable& table, nn::Model& model,
                  const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Table entry id of each step (phrase source lookup or token entry). Throws
/// Error naming the step when a source is missing from the table.
std::vector<std::size_t> step_targets(const OraclePath& path, const PhraseTable& table);

struct RetrievalAccuracy {
  std::size_t steps = 0;
  double accuracy = 0.0;  // top-1 entry lexically identical to the oracle target
  double baseline = 0.0;  // same event for a uniformly random entry
};

/// Top-1 retrieval against oracle targets over the given paths.
RetrievalAccuracy evaluate_retrieval(const std::vector<OraclePath>& paths, const std::vector<const Document*>& docs,
                                     const PhraseTable& table, const nn::Model& model);

}  // namespace phrase_lm
