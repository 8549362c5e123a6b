#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "phrase_lm/match_scorer.hpp"

using namespace phrase_lm;

namespace {

// Owns the storage that Occurrence views point into.
struct Group {
  std::vector<std::vector<TokenId>> contexts;
  std::vector<std::vector<float>> embeddings;
  std::vector<SourceSpan> spans;

  void add(std::string doc, std::size_t start, std::vector<TokenId> ctx, std::vector<float> emb) {
    spans.push_back({std::move(doc), start, start + 2});
    contexts.push_back(std::move(ctx));
    embeddings.push_back(std::move(emb));
  }
  std::vector<Occurrence> view() const {
    std::vector<Occurrence> out;
    for (std::size_t i = 0; i < spans.size(); ++i) out.push_back({spans[i], contexts[i], embeddings[i]});
    return out;
  }
};

double hand_bm25(const std::vector<TokenId>& q, const std::vector<std::vector<TokenId>>& ctxs, std::size_t i) {
  const double k1 = 1.2, b = 0.75;
  const double n = static_cast<double>(ctxs.size());
  double avg = 0;
  for (const auto& c : ctxs) avg += static_cast<double>(c.size());
  avg /= n;
  double s = 0;
  for (TokenId t : std::set<TokenId>(q.begin(), q.end())) {
    double df = 0;
    for (const auto& c : ctxs) df += std::count(c.begin(), c.end(), t) > 0;
    const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    const double tf = static_cast<double>(std::count(ctxs[i].begin(), ctxs[i].end(), t));
    s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * static_cast<double>(ctxs[i].size()) / avg));
  }
  return s;
}

Group random_group(std::mt19937_64& rng, std::size_t size, std::size_t dim = 4) {
  Group g;
  std::normal_distribution<float> nd;
  for (std::size_t i = 0; i < size; ++i) {
    std::vector<TokenId> ctx(3 + rng() % 8);
    for (auto& t : ctx) t = static_cast<TokenId>(2 + rng() % 12);
    std::vector<float> e(dim);
    for (auto& x : e) x = nd(rng);
    g.add("doc" + std::to_string(rng() % 6), rng() % 50, ctx, e);
  }
  return g;
}

}  // namespace

TEST_CASE("bm25_topn: three contexts against a hand evaluation") {
  Group g;
  g.add("a", 0, {2, 3, 4, 2}, {1});
  g.add("b", 0, {3, 5, 6}, {1});
  g.add("c", 0, {2, 7, 8, 9, 10, 11}, {1});
  const std::vector<TokenId> q = {2, 3, 2, 12};
  const auto top = bm25_topn(q, g.view());
  REQUIRE(top.size() == 3);
  std::vector<double> expect = {hand_bm25(q, g.contexts, 0), hand_bm25(q, g.contexts, 1), hand_bm25(q, g.contexts, 2)};
  for (const auto& s : top) CHECK(s.score == doctest::Approx(expect[s.index]).epsilon(1e-12));
  CHECK(top[0].index == 0);
  CHECK(top[0].score > top[1].score);
  CHECK(top[1].score >= top[2].score);
}

TEST_CASE("bm25_topn: degenerate inputs") {
  CHECK(bm25_topn(std::vector<TokenId>{1, 2}, {}).empty());
  Group g;
  g.add("z", 4, {5, 6}, {1});
  g.add("a", 9, {7}, {1});
  g.add("a", 3, {8}, {1});
  const auto top = bm25_topn(std::vector<TokenId>{20, 21}, g.view());
  REQUIRE(top.size() == 3);
  for (const auto& s : top) CHECK(s.score == 0.0);
  CHECK(top[0].index == 2);  // (a,3)
  CHECK(top[1].index == 1);  // (a,9)
  CHECK(top[2].index == 0);
  CHECK(bm25_topn(std::vector<TokenId>{20}, g.view(), 1).size() == 1);

  Group one;
  one.add("x", 0, {3}, {1});
  const auto single = bm25_topn(std::vector<TokenId>{99}, one.view());
  REQUIRE(single.size() == 1);
  CHECK(single[0].index == 0);
}

TEST_CASE("bm25_topn: scores are never negative") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const auto g = random_group(rng, 1 + rng() % 12);
    std::vector<TokenId> q(1 + rng() % 6);
    for (auto& t : q) t = static_cast<TokenId>(2 + rng() % 14);
    for (const auto& s : bm25_topn(q, g.view(), 100)) {
      CHECK(s.score >= 0.0);
      CHECK(s.score == doctest::Approx(hand_bm25(q, g.contexts, s.index)).epsilon(1e-12));
    }
  }
}

TEST_CASE("semantic_sim: dot product") {
  const std::vector<float> a = {1.f, 2.f, -3.f};
  const std::vector<float> b = {-2.f, 1.f, 0.f};
  CHECK(semantic_sim(a, a) == doctest::Approx(14.0));
  CHECK(semantic_sim(a, b) == 0.0);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> nd;
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<float> x(64), y(64);
    for (auto& v : x) v = nd(rng);
    for (auto& v : y) v = nd(rng);
    double ref = 0;
    for (std::size_t i = 0; i < x.size(); ++i) ref += static_cast<double>(x[i]) * y[i];
    CHECK(std::abs(semantic_sim(x, y) - ref) < 1e-6);
    CHECK(semantic_sim(x, y) == semantic_sim(y, x));
  }
}

TEST_CASE("best_source: exclusion and single candidates") {
  Group g;
  g.add("train", 0, {2, 3}, {1, 0});
  g.add("train", 5, {2, 3}, {1, 0});
  Group trn;
  trn.add("train", 10, {2, 3}, {1, 0});
  const auto t = trn.view()[0];
  CHECK_FALSE(best_source(t, g.view()).has_value());
  CHECK_FALSE(best_source(t, {}).has_value());
  g.add("other", 0, {9}, {-1, 0});
  const auto m = best_source(t, g.view());
  REQUIRE(m.has_value());
  CHECK(m->index == 2);
  CHECK(m->semantic == doctest::Approx(-1.0));
}

TEST_CASE("best_source: equals brute force over the BM25 shortlist") {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 100; ++rep) {
    const auto g = random_group(rng, 5 + rng() % 15);
    Group trn;
    trn.add("doc0", 0, {2, 3, 4}, {0.5f, -1.f, 0.2f, 1.f});
    const auto train = trn.view()[0];
    const auto occ = g.view();
    const auto m = best_source(train, occ);

    std::vector<Occurrence> eligible;
    std::vector<std::size_t> back;
    for (std::size_t i = 0; i < occ.size(); ++i) {
      if (occ[i].span.doc_id != "doc0") eligible.push_back(occ[i]), back.push_back(i);
    }
    if (eligible.empty()) {
      CHECK_FALSE(m.has_value());
      continue;
    }
    REQUIRE(m.has_value());
    std::size_t best = 0;
    double best_sim = -1e300;
    bool first = true;
    for (const auto& s : bm25_topn(train.context, eligible, 10)) {
      const double sim = semantic_sim(train.embedding, eligible[s.index].embedding);
      const auto& sp = eligible[s.index].span;
      const auto& bp = eligible[best].span;
      if (first || sim > best_sim || (sim == best_sim && std::tie(sp.doc_id, sp.start) < std::tie(bp.doc_id, bp.start))) {
        best = s.index, best_sim = sim, first = false;
      }
    }
    CHECK(m->index == back[best]);
    CHECK(m->semantic == best_sim);
  }
}

TEST_CASE("best_source: invariant under permutation of the group") {
  std::mt19937_64 rng(23);
  for (int rep = 0; rep < 50; ++rep) {
    auto g = random_group(rng, 4 + rng() % 20);
    Group trn;
    trn.add("none", 0, {2, 5, 7}, {1.f, 0.3f, -0.2f, 0.1f});
    const auto train = trn.view()[0];
    const auto occ = g.view();
    const auto m = best_source(train, occ);
    REQUIRE(m.has_value());
    auto shuffled = occ;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto m2 = best_source(train, shuffled);
    REQUIRE(m2.has_value());
    CHECK(shuffled[m2->index].span == occ[m->index].span);
    CHECK(m2->semantic == m->semantic);
  }
}

TEST_CASE("best_source: shortlist of the whole group is a pure semantic argmax") {
  std::mt19937_64 rng(29);
  for (int rep = 0; rep < 50; ++rep) {
    const auto g = random_group(rng, 2 + rng() % 30);
    Group trn;
    trn.add("none", 0, {3, 4}, {0.2f, 0.9f, -0.4f, 0.3f});
    const auto train = trn.view()[0];
    const auto occ = g.view();
    const auto m = best_source(train, occ, occ.size());
    REQUIRE(m.has_value());
    for (const auto& o : occ) CHECK(semantic_sim(train.embedding, o.embedding) <= m->semantic);
  }
}
