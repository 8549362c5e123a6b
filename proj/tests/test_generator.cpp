#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "fixture.hpp"
#include "helpers.hpp"
#include "phrase_lm/error.hpp"
#include "phrase_lm/generator.hpp"
#include "phrase_lm/trainer.hpp"

using namespace phrase_lm;
using nn::Mat;
using nn::Vec;

namespace {

std::vector<std::string> vocab_strings(const TokenVocab& v) {
  std::vector<std::string> s;
  for (std::size_t i = 0; i < v.size(); ++i) s.push_back(v.str(static_cast<TokenId>(i)));
  return s;
}

// Random table over a model's vocabulary with phrases cut from `texts`.
PhraseTable random_phrase_table(std::mt19937_64& rng, const nn::Model& model, const TokenVocab& v,
                                const std::vector<std::vector<TokenId>>& texts, std::size_t count, double scale) {
  std::normal_distribution<double> nd;
  std::vector<PhraseEntry> entries;
  std::vector<std::vector<float>> emb;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& t = texts[rng() % texts.size()];
    const std::size_t s = rng() % (t.size() - 1);
    const std::size_t e = std::min(t.size(), s + 2 + rng() % 3);
    std::vector<TokenId> toks(t.begin() + static_cast<std::ptrdiff_t>(s), t.begin() + static_cast<std::ptrdiff_t>(e));
    entries.push_back({toks, detokenize(toks, v), {"src" + std::to_string(i), 0, toks.size()}});
    std::vector<float> x(model.config().index_dim);
    for (auto& y : x) y = static_cast<float>(scale * nd(rng));
    emb.push_back(x);
  }
  return build_table(entries, emb, model.trainable().token_embed, vocab_strings(v), {});
}

// Sum over every segmentation of text, each step priced by the likelihood
// distribution at the matching prefix.
double enumerate_paths(std::span<const TokenId> text, std::span<const TokenId> prefix, const nn::Model& model,
                       const PhraseTable& table, const GenerationConfig& cfg) {
  const std::size_t n = text.size();
  std::vector<std::map<std::size_t, double>> step(n);  // step[j][m] = P(next m tokens at j)
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<TokenId> ctx(prefix.begin(), prefix.end());
    ctx.insert(ctx.end(), text.begin(), text.begin() + static_cast<std::ptrdiff_t>(j));
    const auto dist = likelihood_distribution(model.encode_prefix(ctx), table, cfg);
    for (const auto& c : dist.candidates) {
      const auto s = table.surface_tokens(c.entry);
      if (j + s.size() > n || !std::equal(s.begin(), s.end(), text.begin() + static_cast<std::ptrdiff_t>(j))) continue;
      step[j][s.size()] += c.probability;
    }
  }
  std::function<double(std::size_t)> walk = [&](std::size_t j) -> double {
    if (j == n) return 1.0;
    double total = 0;
    for (const auto& [m, p] : step[j]) total += p * walk(j + m);
    return total;
  };
  return std::log(walk(0));
}

}  // namespace

TEST_CASE("filtered_softmax: the hand example and phi = 0") {
  TokenVocab v;
  v.add("t");
  std::vector<PhraseEntry> entries = {{{2, 2}, "t t", {"a", 0, 2}}, {{2, 2}, "t t", {"b", 0, 2}}};
  const auto table = build_table(entries, {{0}, {0}}, Mat::Zero(3, 1), vocab_strings(v), {});
  const std::vector<SearchHit> hits = {{0, std::log(0.5)}, {1, std::log(0.3)}, {table.token_entry(2), std::log(0.2)}};
  const auto d = filtered_softmax(table, hits, 0.4);
  REQUIRE(d.candidates.size() == 2);
  CHECK(d.candidates[0].entry == 0);
  CHECK(d.candidates[0].probability == doctest::Approx(5.0 / 7.0).epsilon(1e-12));
  CHECK(d.candidates[1].probability == doctest::Approx(2.0 / 7.0).epsilon(1e-12));
  CHECK_FALSE(d.fell_back);

  const auto raw = filtered_softmax(table, hits, 0.0);
  REQUIRE(raw.candidates.size() == 3);
  CHECK(raw.candidates[1].probability == doctest::Approx(0.3).epsilon(1e-12));

  // only phrases retrieved, all below phi
  const auto fb = filtered_softmax(table, {{0, 0.0}, {1, 0.0}}, 0.9);
  CHECK(fb.fell_back);
  CHECK(fb.candidates.size() == 2);
  CHECK(fb.candidates[0].probability == doctest::Approx(0.5));
}

TEST_CASE("next_distribution: sums to one, token-only tables, monotone in phi") {
  auto p = testutil::mini_pipeline(testutil::mini_synth(20));
  GenerationConfig cfg;
  cfg.k = 64;
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    const auto& doc = p->store[rng() % p->store.size()];
    const auto prefix = std::span<const TokenId>(doc.tokens).first(rng() % doc.tokens.size());
    std::size_t last_phrases = SIZE_MAX;
    for (double phi : {0.0, 0.01, 0.02, 0.05, 0.1, 0.4, 0.9}) {
      cfg.phi = phi;
      const auto d = next_distribution(prefix, *p->model, p->table, cfg);
      double sum = 0;
      std::size_t phrases = 0;
      for (const auto& c : d.candidates) sum += c.probability, phrases += c.phrase;
      CHECK(std::abs(sum - 1.0) < 1e-6);
      CHECK(phrases <= last_phrases);
      last_phrases = phrases;
    }
  }
  const auto tokens_only = build_table({}, {}, p->model->trainable().token_embed, vocab_strings(p->vocab), {});
  cfg.phi = 0.4;
  const auto d = next_distribution(std::span<const TokenId>(p->store[0].tokens).first(5), *p->model, tokens_only, cfg);
  CHECK(d.candidates.size() == 64);
  for (const auto& c : d.candidates) CHECK_FALSE(c.phrase);
}

TEST_CASE("sample_top_p") {
  CandidateDistribution d;
  d.candidates = {{7, 0.04, false}, {3, 0.90, false}, {5, 0.06, false}};
  std::mt19937_64 rng(2);
  std::map<std::size_t, int> seen;
  for (int i = 0; i < 2000; ++i) ++seen[sample_top_p(d, 0.95, rng)];
  CHECK(seen.count(0) == 0);
  CHECK(seen[1] > 1700);
  CHECK(seen[2] > 50);
  seen.clear();
  for (int i = 0; i < 4000; ++i) ++seen[sample_top_p(d, 1.0, rng)];
  CHECK(seen[0] > 80);
  CHECK(seen[0] < 250);

  CandidateDistribution one;
  one.candidates = {{4, 1.0, true}};
  for (int i = 0; i < 10; ++i) CHECK(sample_top_p(one, 0.5, rng) == 0);

  // equal probabilities: the lower entry id comes first in the nucleus
  CandidateDistribution tie;
  tie.candidates = {{9, 0.5, false}, {2, 0.5, false}};
  for (int i = 0; i < 20; ++i) CHECK(sample_top_p(tie, 0.3, rng) == 1);
}

TEST_CASE("generate: budget, determinism and attribution") {
  auto p = testutil::mini_pipeline(testutil::mini_synth(20));
  GenerationConfig cfg;
  cfg.phi = 0.0;
  cfg.k = 32;
  cfg.seed = 5;
  const auto prefix = std::span<const TokenId>(p->store[0].tokens).first(6);
  cfg.max_new_tokens = 0;
  const auto empty = generate(prefix, *p->model, p->table, p->vocab, cfg);
  CHECK(empty.steps.empty());
  CHECK(empty.tokens.empty());
  CHECK(empty.text.empty());

  cfg.max_new_tokens = 40;
  const auto a = generate(prefix, *p->model, p->table, p->vocab, cfg);
  const auto b = generate(prefix, *p->model, p->table, p->vocab, cfg);
  CHECK(a.tokens.size() == 40);
  CHECK(a.text == b.text);
  CHECK(a.tokens == b.tokens);
  std::size_t emitted = 0;
  for (const auto& s : a.steps) {
    emitted += s.length;
    if (s.kind == StepKind::kPhrase) {
      REQUIRE(s.source.has_value());
      const auto* doc = p->store.find(s.source->doc_id);
      REQUIRE(doc != nullptr);
      std::vector<TokenId> toks(doc->tokens.begin() + static_cast<std::ptrdiff_t>(s.source->start),
                                doc->tokens.begin() + static_cast<std::ptrdiff_t>(s.source->end));
      CHECK(detokenize(toks, p->vocab) == s.surface);
    }
  }
  CHECK(emitted == 40);
  cfg.seed = 6;
  CHECK(generate(prefix, *p->model, p->table, p->vocab, cfg).tokens != a.tokens);
}

TEST_CASE("generate: two-token phrases only") {
  TokenVocab v;
  v.add("red");
  v.add("sky");
  auto mc = testutil::tiny_model_config(v.size());
  nn::Model model(mc);
  model.trainable().prefix.proj.setZero();  // every score is 0: ties resolve to the phrase ids
  std::vector<PhraseEntry> entries = {{{2, 3}, "red sky", {"s", 0, 2}}, {{3, 2}, "sky red", {"s", 1, 3}}};
  const auto table = build_table(entries, {std::vector<float>(8, 1.f), std::vector<float>(8, -1.f)},
                                 model.trainable().token_embed, vocab_strings(v), {});
  GenerationConfig cfg;
  cfg.k = 2;
  cfg.top_p = 1.0;
  cfg.max_new_tokens = 10;
  const auto r = generate(std::vector<TokenId>{2}, model, table, v, cfg);
  CHECK(r.decode_steps() == 5);
  CHECK(r.token_rate == 0.0);
  for (const auto& s : r.steps) CHECK(s.length == 2);

  cfg.max_new_tokens = 11;
  const auto odd = generate(std::vector<TokenId>{2}, model, table, v, cfg);
  REQUIRE(odd.decode_steps() == 6);
  CHECK(odd.tokens.size() == 11);
  CHECK(odd.steps.back().length == 1);
  CHECK(odd.steps.back().source->end - odd.steps.back().source->start == 1);
}

TEST_CASE("dp_likelihood: token-only tables factorize") {
  auto p = testutil::mini_pipeline(testutil::mini_synth(10));
  const auto tokens_only = build_table({}, {}, p->model->trainable().token_embed, vocab_strings(p->vocab), {});
  GenerationConfig cfg;
  const auto& doc = p->store[1].tokens;
  const auto prefix = std::span<const TokenId>(doc).first(4);
  const auto text = std::span<const TokenId>(doc).subspan(4, 6);
  const double ll = dp_likelihood(text, prefix, *p->model, tokens_only, cfg);
  double ref = 0;
  std::vector<TokenId> ctx(prefix.begin(), prefix.end());
  for (TokenId t : text) {
    ref += -token_loss(p->model->encode_prefix(ctx), t, p->model->trainable().token_embed).loss;
    ctx.push_back(t);
  }
  CHECK(ll == doctest::Approx(ref).epsilon(1e-9));
  CHECK_THROWS_AS(dp_likelihood({}, prefix, *p->model, tokens_only, cfg), Error);
}

TEST_CASE("dp_likelihood: three paths for a three-word text") {
  TokenVocab v;
  const auto doc = make_document("t", "The moon rises", v, true, 128);
  nn::Model model(testutil::tiny_model_config(v.size()));
  std::vector<PhraseEntry> entries = {{{doc.tokens[0], doc.tokens[1]}, "The moon", {"s", 0, 2}},
                                      {{doc.tokens[0], doc.tokens[1], doc.tokens[2]}, "The moon rises", {"s", 0, 3}}};
  const auto table = build_table(entries, {std::vector<float>(8, 0.3f), std::vector<float>(8, -0.2f)},
                                 model.trainable().token_embed, vocab_strings(v), {});
  GenerationConfig cfg;
  cfg.phi = 0.0;
  const auto& x = doc.tokens;
  auto dist_at = [&](std::size_t j) {
    return likelihood_distribution(model.encode_prefix(std::span<const TokenId>(x).first(j)), table, cfg);
  };
  auto prob = [&](const CandidateDistribution& d, std::size_t entry) {
    for (const auto& c : d.candidates) {
      if (c.entry == entry) return c.probability;
    }
    return 0.0;
  };
  const auto d0 = dist_at(0), d1 = dist_at(1), d2 = dist_at(2);
  const double tokens = prob(d0, table.token_entry(x[0])) * prob(d1, table.token_entry(x[1])) * prob(d2, table.token_entry(x[2]));
  const double two = prob(d0, 0) * prob(d2, table.token_entry(x[2]));
  const double whole = prob(d0, 1);
  CHECK(two > 0);
  CHECK(whole > 0);
  DpStats stats;
  const double ll = dp_likelihood(x, {}, model, table, cfg, &stats);
  CHECK(ll == doctest::Approx(std::log(tokens + two + whole)).epsilon(1e-12));
  CHECK(stats.distributions == 3);
}

TEST_CASE("dp_likelihood: equals exhaustive enumeration on random tables") {
  auto p = testutil::mini_pipeline(testutil::mini_synth(10));
  std::mt19937_64 rng(9);
  std::vector<std::vector<TokenId>> texts;
  for (const auto& d : p->store) texts.push_back(d.tokens);
  for (int rep = 0; rep < 15; ++rep) {
    const auto table = random_phrase_table(rng, *p->model, p->vocab, texts, 40, 2.0);
    GenerationConfig cfg;
    cfg.k = 8 + rng() % 40;
    cfg.phi = (rep % 3) * 0.05;
    cfg.dp_topk_only = rep % 4 == 1;
    cfg.dp_max_identical = rep % 5 == 2;
    const auto& t = texts[rng() % texts.size()];
    const std::size_t start = rng() % (t.size() - 9);
    const std::size_t n = 1 + rng() % 8;
    const auto text = std::span<const TokenId>(t).subspan(start, n);
    const auto prefix = std::span<const TokenId>(t).first(start);
    const double dp = dp_likelihood(text, prefix, *p->model, table, cfg);
    if (cfg.dp_max_identical) {
      CHECK(std::isfinite(dp));
      continue;
    }
    const double brute = enumerate_paths(text, prefix, *p->model, table, cfg);
    if (std::isinf(brute)) {
      CHECK(std::isinf(dp));
    } else {
      CHECK(std::abs(dp - brute) <= 1e-9 * std::abs(brute) + 1e-12);
    }
  }
}

TEST_CASE("dp_likelihood: step distributions grow linearly") {
  auto p = testutil::mini_pipeline(testutil::mini_synth(10));
  GenerationConfig cfg;
  const auto& t = p->store[0].tokens;
  DpStats a, b;
  dp_likelihood(std::span<const TokenId>(t).first(8), {}, *p->model, p->table, cfg, &a);
  dp_likelihood(std::span<const TokenId>(t).first(16), {}, *p->model, p->table, cfg, &b);
  CHECK(static_cast<double>(b.distributions) <= 4.5 * static_cast<double>(a.distributions));
}

TEST_CASE("lattice_log_likelihood") {
  // every position offers length 1 (p=1/2) and length 2 (p=1/4)
  const auto arcs = [](std::size_t) { return std::vector<LatticeArc>{{1, std::log(0.5)}, {2, std::log(0.25)}}; };
  // f(n) = f(n-1)/2 + f(n-2)/4
  double f0 = 1, f1 = 0.5;
  for (int n = 2; n <= 6; ++n) {
    const double f2 = f1 / 2 + f0 / 4;
    f0 = f1;
    f1 = f2;
  }
  CHECK(lattice_log_likelihood(6, arcs) == doctest::Approx(std::log(f1)).epsilon(1e-12));
  CHECK(std::isinf(lattice_log_likelihood(3, [](std::size_t) { return std::vector<LatticeArc>{{2, 0.0}}; })));
}

TEST_CASE("score_options") {
  auto p = testutil::mini_pipeline(testutil::mini_synth(30));
  GenerationConfig cfg;
  cfg.phi = 0.0;
  cfg.k = p->table.size();
  const auto q = tokenize("alpha", p->vocab);
  const auto opt = std::vector<TokenId>(p->store[0].tokens.begin(), p->store[0].tokens.begin() + 3);
  const auto tie = score_options(q, {opt, opt}, *p->model, p->table, cfg);
  CHECK(tie.chosen == 0);
  CHECK(tie.scores[0] == tie.scores[1]);
  CHECK_THROWS_AS(score_options(q, {opt}, *p->model, p->table, cfg), Error);
  CHECK_THROWS_AS(score_options(q, {opt, {}}, *p->model, p->table, cfg), Error);

  // a planted phrase present in the table beats same-length filler controls
  std::size_t checked = 0;
  for (const auto& inst : p->synth.mc) {
    const auto question = tokenize(inst.question, p->vocab);
    std::vector<std::vector<TokenId>> options;
    for (const auto& o : inst.options) options.push_back(tokenize(o, p->vocab));
    if (group_entries_by_surface(p->table).count(options[inst.answer]) == 0) continue;
    const auto s = score_options(question, options, *p->model, p->table, cfg);
    for (std::size_t i = 0; i < options.size(); ++i) {
      if (i != inst.answer) CHECK(s.scores[inst.answer] > s.scores[i]);
    }
    ++checked;
  }
  CHECK(checked > 0);
}
