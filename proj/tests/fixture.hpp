#pragma once

// A small synthetic corpus pushed through mining, indexing and oracle
// construction, shared by the training, generation and acceptance checks.

#include <memory>

#include "phrase_lm/corpus.hpp"
#include "phrase_lm/neural.hpp"
#include "phrase_lm/pipeline.hpp"
#include "phrase_lm/phrase_miner.hpp"
#include "phrase_lm/synth.hpp"

namespace testutil {

struct MiniPipeline {
  phrase_lm::SynthCorpus synth;
  phrase_lm::TokenVocab vocab;
  phrase_lm::DocumentStore store;
  std::vector<phrase_lm::PhraseCandidate> candidates;
  std::unique_ptr<phrase_lm::nn::Model> model;
  phrase_lm::PhraseTable table;
  phrase_lm::OracleSet oracles;
};

inline phrase_lm::nn::ModelConfig tiny_model_config(std::size_t vocab, std::uint64_t seed = 3) {
  phrase_lm::nn::ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.index_dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.ffn_mult = 2;
  c.max_prefix_len = 32;
  c.seed = seed;
  return c;
}

inline std::unique_ptr<MiniPipeline> mini_pipeline(const phrase_lm::SynthConfig& sc,
                                                   const phrase_lm::nn::ModelConfig* mc = nullptr) {
  using namespace phrase_lm;
  auto p = std::make_unique<MiniPipeline>();
  p->synth = make_synthetic(sc);
  for (const auto& d : p->synth.docs) p->store.add(make_document(d.id, d.text, p->vocab, true, 128));
  FilterConfig fc;
  fc.thresholds = uniform_idf_thresholds(0.0, 10.0);
  const auto idf = compute_idf(p->store, span_surfaces(p->synth.spans, p->store, fc));
  p->candidates = filter_candidates(p->synth.spans, p->store, p->vocab, idf, fc);
  p->model = std::make_unique<nn::Model>(mc ? *mc : tiny_model_config(p->vocab.size()));
  p->table = index_candidates(p->store, p->vocab, p->candidates, *p->model, "mini");
  p->oracles = build_oracles(all_documents(p->store), p->candidates, p->table, p->store, *p->model);
  return p;
}

inline phrase_lm::SynthConfig mini_synth(std::size_t docs = 30, std::uint64_t seed = 7) {
  phrase_lm::SynthConfig sc;
  sc.docs = docs;
  sc.filler_words = 60;
  sc.phrases = 8;
  sc.min_words = 25;
  sc.max_words = 40;
  sc.mc_instances = 10;
  sc.seed = seed;
  return sc;
}

}  // namespace testutil
