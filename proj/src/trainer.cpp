#include "phrase_lm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "phrase_lm/error.hpp"
#include "phrase_lm/parallel.hpp"

namespace phrase_lm {

using nn::Mat;
using nn::Vec;

void TrainConfig::validate() const {
  if (alpha < 0) throw ConfigError("alpha must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (sr_k < 1) throw ConfigError("sr_k must be at least 1");
  if (learning_rate < 0) throw ConfigError("learning_rate must be non-negative");
}

// ---------------------------------------------------------------------------
// losses

namespace {

void require_finite(const Vec& v, const char* what) {
  if (!v.allFinite()) throw Error(std::string("non-finite ") + what);
}

double log_sum_exp(const Vec& z) {
  const double mx = z.maxCoeff();
  return mx + std::log((z.array() - mx).exp().sum());
}

}  // namespace

InfoNceResult infonce_loss(const Vec& q, const Vec& pos, const std::vector<Vec>& negs) {
  require_finite(q, "query");
  require_finite(pos, "positive");
  for (const auto& n : negs) {
    if (n.size() != q.size()) throw Error("negative dimension mismatch");
    require_finite(n, "negative");
  }
  if (pos.size() != q.size()) throw Error("positive dimension mismatch");
  Vec z(static_cast<Eigen::Index>(negs.size() + 1));
  z(0) = q.dot(pos);
  for (std::size_t i = 0; i < negs.size(); ++i) z(static_cast<Eigen::Index>(i + 1)) = q.dot(negs[i]);
  const double lse = log_sum_exp(z);
  InfoNceResult r;
  r.loss = lse - z(0);
  const Vec p = (z.array() - lse).exp();
  r.d_query = (p(0) - 1.0) * pos;
  r.d_positive = (p(0) - 1.0) * q;
  r.d_negatives.reserve(negs.size());
  for (std::size_t i = 0; i < negs.size(); ++i) {
    const double pi = p(static_cast<Eigen::Index>(i + 1));
    r.d_query += pi * negs[i];
    r.d_negatives.push_back(pi * q);
  }
  return r;
}

TokenLossResult token_loss(const Vec& q, TokenId target, const Mat& E) {
  if (target >= static_cast<std::size_t>(E.rows())) throw Error("target token outside vocabulary");
  require_finite(q, "query");
  const Vec logits = E * q;
  const double lse = log_sum_exp(logits);
  TokenLossResult r;
  r.loss = lse - logits(target);
  Vec p = (logits.array() - lse).exp();
  p(target) -= 1.0;
  r.d_query = E.transpose() * p;
  r.d_embed = p * q.transpose();
  return r;
}

// ---------------------------------------------------------------------------
// negatives

bool is_continuation_prefix(const PhraseTable& table, std::size_t entry, std::span<const TokenId> continuation) {
  const auto s = table.surface_tokens(entry);
  return s.size() <= continuation.size() && std::equal(s.begin(), s.end(), continuation.begin());
}

NegativeSet mine_negatives(std::size_t target, std::span<const TokenId> continuation,
                           const std::vector<std::size_t>& other_targets, const std::vector<std::size_t>& last_topk,
                           const PhraseTable& table, std::size_t hard_count, std::mt19937_64& rng) {
  const auto eligible = [&](std::size_t id) { return id != target && !is_continuation_prefix(table, id, continuation); };
  NegativeSet out;
  std::set<std::size_t> in_batch;
  for (std::size_t id : other_targets) {
    if (eligible(id)) in_batch.insert(id);
  }
  out.in_batch.assign(in_batch.begin(), in_batch.end());

  std::vector<std::size_t> pool;
  std::set<std::size_t> seen;
  for (std::size_t id : last_topk) {
    if (eligible(id) && seen.insert(id).second) pool.push_back(id);
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  if (pool.size() > hard_count) pool.resize(hard_count);
  std::sort(pool.begin(), pool.end());
  out.hard = std::move(pool);
  return out;
}

// ---------------------------------------------------------------------------
// batches

namespace {

Vec entry_vector(const nn::Model& model, const PhraseTable& table, std::size_t id) {
  if (table.is_token(id)) return model.trainable().token_embed.row(table.token_of(id)).transpose();
  const auto e = table.embedding(id);
  Vec v(static_cast<Eigen::Index>(e.size()));
  for (std::size_t i = 0; i < e.size(); ++i) v(static_cast<Eigen::Index>(i)) = e[i];
  return v;
}

struct SegmentWork {
  nn::EncoderCache cache;
  Mat queries;
  Mat d_queries;
};

}  // namespace

BatchLoss batch_loss(const nn::Model& model, const PhraseTable& table, const TrainBatch& batch, double alpha,
                     nn::TrainableParams* grads, unsigned threads) {
  const auto& E = model.trainable().token_embed;
  std::vector<SegmentWork> work(batch.segments.size());
  parallel_for(batch.segments.size(), threads, [&](std::size_t s) {
    work[s].queries = model.prefix_forward(batch.segments[s].input, work[s].cache);
    work[s].d_queries = Mat::Zero(work[s].queries.rows(), work[s].queries.cols());
  });

  BatchLoss out;
  for (const auto& seg : batch.segments) out.positions += seg.targets.size();
  out.examples = batch.examples.size();
  Mat dE;
  if (grads) dE = Mat::Zero(E.rows(), E.cols());

  // next-token cross-entropy
  double token_sum = 0.0;
  const double token_scale = out.positions ? alpha / static_cast<double>(out.positions) : 0.0;
  for (std::size_t s = 0; s < batch.segments.size(); ++s) {
    const auto& seg = batch.segments[s];
    Mat logits = work[s].queries * E.transpose();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const double mx = logits.row(r).maxCoeff();
      const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
      const TokenId y = seg.targets[static_cast<std::size_t>(r)];
      token_sum += lse - logits(r, y);
      if (grads) {
        logits.row(r) = (logits.row(r).array() - lse).exp().matrix();
        logits(r, y) -= 1.0;
      }
    }
    if (grads && token_scale != 0.0) {
      logits *= token_scale;
      work[s].d_queries.noalias() += logits * E;
      dE.noalias() += logits.transpose() * work[s].queries;
    }
  }
  out.token = out.positions ? token_sum / static_cast<double>(out.positions) : 0.0;

  // contrastive phrase loss
  double phrase_sum = 0.0;
  const double phrase_scale = out.examples ? 1.0 / static_cast<double>(out.examples) : 0.0;
  for (const auto& ex : batch.examples) {
    const Vec q = work[ex.segment].queries.row(static_cast<Eigen::Index>(ex.row)).transpose();
    std::vector<Vec> negs;
    negs.reserve(ex.negatives.size());
    for (std::size_t id : ex.negatives) negs.push_back(entry_vector(model, table, id));
    const auto r = infonce_loss(q, entry_vector(model, table, ex.target), negs);
    phrase_sum += r.loss;
    if (!grads) continue;
    work[ex.segment].d_queries.row(static_cast<Eigen::Index>(ex.row)) += phrase_scale * r.d_query.transpose();
    if (table.is_token(ex.target)) dE.row(table.token_of(ex.target)) += phrase_scale * r.d_positive.transpose();
    for (std::size_t i = 0; i < ex.negatives.size(); ++i) {
      if (table.is_token(ex.negatives[i])) {
        dE.row(table.token_of(ex.negatives[i])) += phrase_scale * r.d_negatives[i].transpose();
      }
    }
  }
  out.phrase = out.examples ? phrase_sum / static_cast<double>(out.examples) : 0.0;
  out.combined = combined_loss(out.phrase, out.token, alpha);

  if (grads) {
    if (threads <= 1) {
      for (std::size_t s = 0; s < work.size(); ++s) model.prefix_backward(work[s].cache, work[s].d_queries, *grads);
    } else {
      std::vector<nn::TrainableParams> partial(work.size(), grads->zeros_like());
      parallel_for(work.size(), threads,
                   [&](std::size_t s) { model.prefix_backward(work[s].cache, work[s].d_queries, partial[s]); });
      for (const auto& p : partial) grads->add_scaled(p, 1.0);
    }
    grads->token_embed += dE;
  }
  return out;
}

// ---------------------------------------------------------------------------

Adam::Adam(const nn::TrainableParams& shape, double beta1, double beta2, double eps)
    : m_(shape.zeros_like()), v_(shape.zeros_like()), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(nn::TrainableParams& params, const nn::TrainableParams& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::vector<const Mat*> g;
  grads.visit([&](const std::string&, const Mat& x) { g.push_back(&x); });
  std::vector<Mat*> m, v;
  m_.visit([&](const std::string&, Mat& x) { m.push_back(&x); });
  v_.visit([&](const std::string&, Mat& x) { v.push_back(&x); });
  std::size_t i = 0;
  params.visit([&](const std::string&, Mat& p) {
    m[i]->array() = beta1_ * m[i]->array() + (1.0 - beta1_) * g[i]->array();
    v[i]->array() = beta2_ * v[i]->array() + (1.0 - beta2_) * g[i]->array().square();
    p.array() -= lr * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + eps_);
    ++i;
  });
}

// ---------------------------------------------------------------------------
// shared helpers for training, SR and evaluation

namespace {

/// Fixed windows of max_prefix_len - 1 tokens; each is encoded on its own
/// with BOS prepended.
std::vector<TrainSegment> make_segments(std::span<const TokenId> text, std::size_t max_prefix_len,
                                        std::vector<std::size_t>* starts = nullptr) {
  const std::size_t w = max_prefix_len - 1;
  std::vector<TrainSegment> segs;
  for (std::size_t s = 0; s < text.size(); s += w) {
    const std::size_t e = std::min(text.size(), s + w);
    TrainSegment seg;
    seg.input.push_back(TokenVocab::kBos);
    seg.input.insert(seg.input.end(), text.begin() + static_cast<std::ptrdiff_t>(s),
                     text.begin() + static_cast<std::ptrdiff_t>(e - 1));
    seg.targets.assign(text.begin() + static_cast<std::ptrdiff_t>(s), text.begin() + static_cast<std::ptrdiff_t>(e));
    if (starts) starts->push_back(s);
    segs.push_back(std::move(seg));
  }
  return segs;
}

/// Query for every position 0..n-1 under the segment layout used in training.
Mat document_queries(const nn::Model& model, std::span<const TokenId> text) {
  const auto segs = make_segments(text, model.config().max_prefix_len);
  Mat out(static_cast<Eigen::Index>(text.size()), static_cast<Eigen::Index>(model.config().index_dim));
  Eigen::Index row = 0;
  for (const auto& seg : segs) {
    nn::EncoderCache cache;
    const Mat q = model.prefix_forward(seg.input, cache);
    out.middleRows(row, q.rows()) = q;
    row += q.rows();
  }
  return out;
}

std::span<const TokenId> tokens_of(const Document& d) { return d.tokens; }

}  // namespace

std::vector<std::size_t> step_targets(const OraclePath& path, const PhraseTable& table) {
  std::vector<std::size_t> out;
  out.reserve(path.steps.size());
  for (std::size_t i = 0; i < path.steps.size(); ++i) {
    const auto& s = path.steps[i];
    if (s.kind == StepKind::kToken) {
      if (s.token_id >= table.token_count()) {
        throw Error("oracle '" + path.doc_id + "' step " + std::to_string(i) + ": token outside the table vocabulary");
      }
      out.push_back(table.token_entry(s.token_id));
    } else {
      auto id = table.find_source(*s.source);
      if (!id) {
        throw Error("oracle '" + path.doc_id + "' step " + std::to_string(i) + ": source (" + s.source->doc_id + "," +
                    std::to_string(s.source->start) + "," + std::to_string(s.source->end) + ") is not in the table");
      }
      out.push_back(*id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// self-reinforcement

SrStats self_reinforce_round(std::vector<OraclePath>& paths, const std::vector<const Document*>& docs,
                             const std::vector<std::vector<ResolvedCandidate>>& resolved, const PhraseTable& table,
                             const nn::Model& model, const TrainConfig& cfg, TopKCache& cache,
                             std::vector<SrReplacement>* replacements) {
  if (paths.size() != docs.size() || resolved.size() != docs.size()) {
    throw Error("self_reinforce_round: paths, documents and resolved candidates must align");
  }
  SrStats stats;
  for (std::size_t d = 0; d < paths.size(); ++d) {
    const Document& doc = *docs[d];
    const auto text = tokens_of(doc);
    const Mat Q = document_queries(model, text);
    std::map<std::size_t, Mat> block_states;
    const auto frozen_score = [&](std::size_t pos, std::size_t len, std::size_t entry) -> std::optional<double> {
      const std::size_t b = doc.block_of(pos);
      const auto& block = doc.blocks[b];
      if (!block.contains(pos, pos + len)) return std::nullopt;
      auto it = block_states.find(b);
      if (it == block_states.end()) {
        it = block_states.emplace(b, model.encode_block(text.subspan(block.start, block.size()))).first;
      }
      const auto v = to_query(model.phrase_from_states(it->second, pos - block.start, pos + len - block.start));
      return dot_score(v, table.embedding(entry));
    };

    auto& steps = paths[d].steps;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const std::size_t pos = steps[i].position;
      const auto continuation = text.subspan(pos);
      const auto hits = search_exact(table, to_query(Q.row(static_cast<Eigen::Index>(pos)).transpose()), cfg.sr_k);
      auto& slot = cache[{d, pos}];
      slot.clear();
      for (const auto& h : hits) slot.push_back(h.entry_id);

      std::optional<std::size_t> best;
      double best_score = 0.0;
      for (const auto& h : hits) {
        if (table.is_token(h.entry_id) || !is_continuation_prefix(table, h.entry_id, continuation)) continue;
        const auto& e = table.phrase(h.entry_id);
        if (e.source.doc_id == doc.id) continue;
        double score = h.score;
        if (cfg.sr_score == SrScore::kFrozen) {
          auto f = frozen_score(pos, e.tokens.size(), h.entry_id);
          if (!f) continue;
          score = *f;
        }
        const bool better = !best || score > best_score ||
                            (score == best_score && (e.tokens.size() > table.phrase(*best).tokens.size() ||
                                                     (e.tokens.size() == table.phrase(*best).tokens.size() &&
                                                      h.entry_id < *best)));
        if (better) {
          best = h.entry_id;
          best_score = score;
        }
      }
      ++stats.steps_visited;
      if (!best) continue;

      const auto& e = table.phrase(*best);
      if (!is_continuation_prefix(table, *best, continuation)) {
        throw std::logic_error("self-reinforcement picked an invalid phrase");
      }
      OracleStep next;
      next.kind = StepKind::kPhrase;
      next.position = pos;
      next.length = e.tokens.size();
      next.source = e.source;
      next.score = best_score;
      const auto& cur = steps[i];
      if (cur.kind == StepKind::kPhrase && cur.length == next.length && cur.source == next.source) continue;

      ++stats.replaced;
      if (replacements) replacements->push_back({d, pos, *best});
      if (cur.length == next.length) {
        steps[i] = std::move(next);
      } else {
        steps.resize(i);
        steps.push_back(std::move(next));
        auto tail = segment_greedy(text, resolved[d], cfg.segment_rule, pos + steps.back().length);
        steps.insert(steps.end(), std::make_move_iterator(tail.begin()), std::make_move_iterator(tail.end()));
      }
    }
    validate_path(paths[d], text);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// training loop

namespace {

struct PreparedDoc {
  std::vector<TrainSegment> segments;
  std::vector<std::size_t> seg_starts;
};

TrainBatch make_batch(const std::vector<std::size_t>& doc_ids, const std::vector<PreparedDoc>& prepared,
                      const std::vector<OraclePath>& paths, const std::vector<const Document*>& docs,
                      const PhraseTable& table, const TrainConfig& cfg, const TopKCache& cache, std::mt19937_64& rng) {
  TrainBatch batch;
  struct Pending {
    std::size_t doc, position, target;
  };
  std::vector<Pending> pending;
  for (std::size_t d : doc_ids) {
    const auto& prep = prepared[d];
    const std::size_t seg_base = batch.segments.size();
    batch.segments.insert(batch.segments.end(), prep.segments.begin(), prep.segments.end());
    const auto targets = step_targets(paths[d], table);
    for (std::size_t i = 0; i < paths[d].steps.size(); ++i) {
      const std::size_t pos = paths[d].steps[i].position;
      const auto seg = static_cast<std::size_t>(
          std::upper_bound(prep.seg_starts.begin(), prep.seg_starts.end(), pos) - prep.seg_starts.begin() - 1);
      TrainExample ex;
      ex.segment = seg_base + seg;
      ex.row = pos - prep.seg_starts[seg];
      ex.target = targets[i];
      batch.examples.push_back(std::move(ex));
      pending.push_back({d, pos, targets[i]});
    }
  }
  std::vector<std::size_t> batch_targets;
  for (const auto& p : pending) batch_targets.push_back(p.target);
  std::sort(batch_targets.begin(), batch_targets.end());
  batch_targets.erase(std::unique(batch_targets.begin(), batch_targets.end()), batch_targets.end());

  static const std::vector<std::size_t> kEmpty;
  const auto topk_of = [&](const Pending& p) -> const std::vector<std::size_t>& {
    auto it = cache.find({p.doc, p.position});
    return it == cache.end() ? kEmpty : it->second;
  };
  std::vector<NegativeSet> sets(pending.size());
  for (std::size_t i = 0; i < pending.size(); ++i) {
    const auto& p = pending[i];
    sets[i] = mine_negatives(p.target, tokens_of(*docs[p.doc]).subspan(p.position), batch_targets, topk_of(p), table,
                             cfg.hard_negatives_per_example, rng);
  }
  std::vector<std::size_t> hard_pool;
  if (cfg.in_batch_includes_hard) {
    for (const auto& s : sets) hard_pool.insert(hard_pool.end(), s.hard.begin(), s.hard.end());
    std::sort(hard_pool.begin(), hard_pool.end());
    hard_pool.erase(std::unique(hard_pool.begin(), hard_pool.end()), hard_pool.end());
  }
  for (std::size_t i = 0; i < pending.size(); ++i) {
    std::set<std::size_t> negs(sets[i].in_batch.begin(), sets[i].in_batch.end());
    negs.insert(sets[i].hard.begin(), sets[i].hard.end());
    const auto cont = tokens_of(*docs[pending[i].doc]).subspan(pending[i].position);
    for (std::size_t id : hard_pool) {
      if (id != pending[i].target && !is_continuation_prefix(table, id, cont)) negs.insert(id);
    }
    batch.examples[i].negatives.assign(negs.begin(), negs.end());
  }
  return batch;
}

}  // namespace

TrainResult train(std::vector<OraclePath>& paths, const std::vector<const Document*>& docs,
                  const std::vector<std::vector<ResolvedCandidate>>& resolved, PhraseTable& table, nn::Model& model,
                  const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  if (paths.size() != docs.size() || resolved.size() != docs.size()) {
    throw Error("train: paths, documents and resolved candidates must align");
  }
  if (table.dim() != model.config().index_dim || table.token_count() != model.config().vocab_size) {
    throw Error("train: phrase table does not match the model (dim or vocabulary)");
  }
  for (std::size_t d = 0; d < paths.size(); ++d) {
    validate_path(paths[d], tokens_of(*docs[d]));
    step_targets(paths[d], table);
  }

  std::vector<PreparedDoc> prepared(docs.size());
  for (std::size_t d = 0; d < docs.size(); ++d) {
    prepared[d].segments = make_segments(tokens_of(*docs[d]), model.config().max_prefix_len, &prepared[d].seg_starts);
  }

  std::mt19937_64 rng(cfg.seed);
  TopKCache cache;
  TrainResult result;
  Adam adam(model.trainable(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  auto grads = model.trainable().zeros_like();

  // SR after epochs r * E / (R + 1), r = 1..R
  std::vector<std::size_t> sr_after;
  if (cfg.epochs > 0) {
    for (std::size_t r = 1; r <= cfg.sr_rounds; ++r) {
      sr_after.push_back(std::max<std::size_t>(1, r * cfg.epochs / (cfg.sr_rounds + 1)));
    }
  }

  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch <= cfg.epochs; ++epoch) {
    const bool update = epoch > 0;
    if (update) std::shuffle(order.begin(), order.end(), rng);
    double phrase_sum = 0.0, token_sum = 0.0;
    std::size_t n_examples = 0, n_positions = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(b),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.batch_size)));
      const auto batch = make_batch(ids, prepared, paths, docs, table, cfg, cache, rng);
      if (update) grads.set_zero();
      const auto loss = batch_loss(model, table, batch, cfg.alpha, update ? &grads : nullptr, cfg.threads);
      phrase_sum += loss.phrase * static_cast<double>(loss.examples);
      token_sum += loss.token * static_cast<double>(loss.positions);
      n_examples += loss.examples;
      n_positions += loss.positions;
      if (update) {
        const double warm = cfg.warmup_steps ? std::min(1.0, static_cast<double>(adam.steps() + 1) / cfg.warmup_steps) : 1.0;
        adam.step(model.trainable(), grads, cfg.learning_rate * warm);
        model.quantize();
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.phrase_loss = n_examples ? phrase_sum / static_cast<double>(n_examples) : 0.0;
    m.token_loss = n_positions ? token_sum / static_cast<double>(n_positions) : 0.0;
    m.combined = combined_loss(m.phrase_loss, m.token_loss, cfg.alpha);
    for (std::size_t when : sr_after) {
      if (when != epoch) continue;
      table.set_token_embeddings(model.trainable().token_embed);
      result.sr_rounds.push_back(self_reinforce_round(paths, docs, resolved, table, model, cfg, cache));
      m.sr_update_rate = result.sr_rounds.back().update_rate();
    }
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  table.set_token_embeddings(model.trainable().token_embed);
  return result;
}

RetrievalAccuracy evaluate_retrieval(const std::vector<OraclePath>& paths, const std::vector<const Document*>& docs,
                                     const PhraseTable& table, const nn::Model& model) {
  const auto groups = group_entries_by_surface(table);
  RetrievalAccuracy acc;
  double hits = 0.0, base = 0.0;
  const double n = static_cast<double>(table.size());
  for (std::size_t d = 0; d < paths.size(); ++d) {
    const auto text = tokens_of(*docs[d]);
    const Mat Q = document_queries(model, text);
    const auto targets = step_targets(paths[d], table);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto pos = paths[d].steps[i].position;
      const auto top = search_exact(table, to_query(Q.row(static_cast<Eigen::Index>(pos)).transpose()), 1);
      const auto want = table.surface_tokens(targets[i]);
      const auto got = table.surface_tokens(top.front().entry_id);
      if (std::equal(want.begin(), want.end(), got.begin(), got.end())) hits += 1.0;
      if (table.is_token(targets[i])) {
        base += 1.0 / n;
      } else {
        base += static_cast<double>(groups.at(std::vector<TokenId>(want.begin(), want.end())).size()) / n;
      }
      ++acc.steps;
    }
  }
  if (acc.steps) {
    acc.accuracy = hits / static_cast<double>(acc.steps);
    acc.baseline = base / static_cast<double>(acc.steps);
  }
  return acc;
}

}  // namespace phrase_lm
