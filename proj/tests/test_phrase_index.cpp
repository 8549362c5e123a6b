#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "helpers.hpp"
#include "phrase_lm/error.hpp"
#include "phrase_lm/phrase_index.hpp"

using namespace phrase_lm;

namespace {

// P random phrase entries and V token entries with Gaussian rows.
PhraseTable random_table(std::mt19937_64& rng, std::size_t phrases, std::size_t vocab, std::size_t dim,
                         std::string prefix = "d", std::uint64_t checksum = 1) {
  std::normal_distribution<double> nd;
  std::vector<PhraseEntry> entries;
  std::vector<std::vector<float>> emb;
  for (std::size_t i = 0; i < phrases; ++i) {
    entries.push_back({{2, 3}, "p" + std::to_string(i), {prefix + std::to_string(i), 0, 2}});
    std::vector<float> e(dim);
    for (auto& x : e) x = static_cast<float>(nd(rng));
    emb.push_back(e);
  }
  nn::Mat tok(vocab, dim);
  for (Eigen::Index i = 0; i < tok.size(); ++i) tok.data()[i] = static_cast<float>(nd(rng));
  std::vector<std::string> strings;
  for (std::size_t t = 0; t < vocab; ++t) strings.push_back("t" + std::to_string(t));
  return build_table(entries, emb, tok, strings, {"c", 7, checksum});
}

std::vector<float> random_query(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> nd;
  std::vector<float> q(dim);
  for (auto& x : q) x = static_cast<float>(nd(rng));
  return q;
}

std::vector<SearchHit> brute_force(const PhraseTable& t, const std::vector<float>& q, std::size_t k) {
  std::vector<SearchHit> all;
  for (std::size_t i = 0; i < t.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < t.dim(); ++j) s += static_cast<double>(t.embedding(i)[j]) * q[j];
    all.push_back({i, s});
  }
  std::sort(all.begin(), all.end(), [](const SearchHit& a, const SearchHit& b) {
    return a.score != b.score ? a.score > b.score : a.entry_id < b.entry_id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

}  // namespace

TEST_CASE("build_table: token-only tables, duplicates and dim errors") {
  nn::Mat tok = nn::Mat::Identity(5, 3).eval();
  const std::vector<std::string> strings = {"<bos>", "<unk>", "a", "b", "c"};
  const auto t = build_table({}, {}, tok, strings, {});
  CHECK(t.size() == 5);
  CHECK(t.phrase_count() == 0);
  CHECK(t.is_token(0));
  CHECK(t.surface(3) == "b");

  PhraseEntry e{{2, 3}, "a b", {"x", 0, 2}};
  const auto dup = build_table({e, e}, {{1, 0, 0}, {0, 1, 0}}, tok, strings, {});
  CHECK(dup.phrase_count() == 2);
  CHECK(dup.find_source({"x", 0, 2}) == 0u);
  CHECK(dup.token_entry(2) == 4);

  try {
    build_table({e, e}, {{1, 0, 0}, {0, 1}}, tok, strings, {});
    FAIL("expected an error");
  } catch (const Error& err) {
    CHECK(std::string(err.what()).find("1") != std::string::npos);
  }
  CHECK_THROWS_AS(build_table({e}, {{1, 0, 0}, {1, 0, 0}}, tok, strings, {}), Error);
}

TEST_CASE("search_exact: orthonormal basis and k cap") {
  PhraseEntry e{{2}, "x", {"s", 0, 2}};
  nn::Mat tok = nn::Mat::Zero(2, 3);
  const auto t = build_table({e, e, e}, {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, tok, {"<bos>", "<unk>"}, {});
  const std::vector<float> q = {0, 1, 0};
  const auto hits = search_exact(t, q, 1);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].entry_id == 1);
  CHECK(hits[0].score == 1.0);
  const auto all = search_exact(t, q, 100);
  CHECK(all.size() == 5);
  // zero scores tie-break by id
  CHECK(all[1].entry_id == 0);
  CHECK(all[2].entry_id == 2);
  CHECK(search_exact(t, q, 0).empty());
}

TEST_CASE("search_exact: equals a scalar brute force") {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    const auto t = random_table(rng, 1000, 30, 16);
    const auto q = random_query(rng, 16);
    for (std::size_t k : {1, 16, 128}) CHECK(search_exact(t, q, k) == brute_force(t, q, k));
  }
}

TEST_CASE("ivf: exhaustive probing is exact and recall grows with nprobe") {
  std::mt19937_64 rng(2);
  const auto t = random_table(rng, 2000, 20, 8);
  CHECK_THROWS_AS(IvfIndex::build(t, t.size() + 1, 1), Error);
  const auto single = IvfIndex::build(t, 1, 1);
  CHECK(single.nlist() == 1);
  const auto ivf = IvfIndex::build(t, 32, 1);
  std::size_t total = 0;
  for (const auto& l : ivf.lists()) total += l.size();
  CHECK(total == t.size());
  CHECK_THROWS_AS(ivf.search(t, random_query(rng, 8), 5, 0), Error);
  CHECK_THROWS_AS(ivf.search(t, random_query(rng, 8), 5, 33), Error);
  for (int rep = 0; rep < 10; ++rep) {
    const auto q = random_query(rng, 8);
    const auto exact = search_exact(t, q, 50);
    CHECK(ivf.search(t, q, 50, 32) == exact);
    CHECK(single.search(t, q, 50, 1) == exact);
    double last = 0;
    for (std::size_t np : {1, 2, 4, 8, 16, 32}) {
      const double r = recall_at_k(exact, ivf.search(t, q, 50, np));
      CHECK(r >= last);
      last = r;
    }
    CHECK(last == 1.0);
  }
}

TEST_CASE("merge_tables") {
  std::mt19937_64 rng(3);
  const auto a = random_table(rng, 20, 6, 4, "a");
  const auto b = random_table(rng, 15, 6, 4, "b");
  const auto empty = random_table(rng, 0, 6, 4, "e");
  const auto ae = merge_tables(a, empty);
  CHECK(ae.embeddings() == std::vector<float>(a.embeddings().begin(), a.embeddings().end()));
  CHECK(ae.phrase_count() == 20);
  CHECK(ae.embeddings() == a.embeddings());

  const auto ab = merge_tables(a, b), ba = merge_tables(b, a);
  CHECK(ab.phrase_count() == 35);
  CHECK(ab.token_count() == 6);
  CHECK(ab.phrase(20).source.doc_id == "b0");
  auto key = [](const PhraseTable& t) {
    std::vector<std::pair<SourceSpan, std::vector<float>>> out;
    for (std::size_t i = 0; i < t.phrase_count(); ++i) {
      auto e = t.embedding(i);
      out.push_back({t.phrase(i).source, {e.begin(), e.end()}});
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  CHECK(key(ab) == key(ba));
  CHECK(ab.find_source({"b3", 0, 2}) == 23u);

  const auto other = random_table(rng, 5, 6, 4, "o", 99);
  CHECK_THROWS_AS(merge_tables(a, other), Error);
  CHECK(merge_tables(a, other, true).phrase_count() == 25);
  const auto wide = random_table(rng, 5, 6, 5, "w");
  CHECK_THROWS_AS(merge_tables(a, wide, true), Error);
}

TEST_CASE("persistence round trip") {
  std::mt19937_64 rng(4);
  const auto t = random_table(rng, 50, 12, 6);
  const auto dir = std::filesystem::temp_directory_path() / "plm_test_index";
  std::filesystem::create_directories(dir);
  t.save(dir / "t.bin");
  CHECK(std::filesystem::exists(sidecar_path(dir / "t.bin")));
  const auto back = PhraseTable::load(dir / "t.bin");
  CHECK(back.embeddings() == t.embeddings());
  CHECK(back.provenance() == t.provenance());
  REQUIRE(back.size() == t.size());
  for (std::size_t i = 0; i < t.phrase_count(); ++i) {
    CHECK(back.phrase(i).source == t.phrase(i).source);
    CHECK(back.phrase(i).surface == t.phrase(i).surface);
    CHECK(back.phrase(i).tokens == t.phrase(i).tokens);
  }
  CHECK(back.surface(t.token_entry(3)) == "t3");
  std::filesystem::remove(sidecar_path(dir / "t.bin"));
  CHECK_THROWS_AS(PhraseTable::load(dir / "t.bin"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("attribution and surface groups") {
  TokenVocab v;
  const auto store = testutil::store_of({{"a", "the moon rises"}, {"b", "a full moon rises"}}, v);
  auto entry = [&](const std::string& doc, std::size_t s, std::size_t e) {
    const auto& d = *store.find(doc);
    std::vector<TokenId> toks(d.tokens.begin() + static_cast<std::ptrdiff_t>(s), d.tokens.begin() + static_cast<std::ptrdiff_t>(e));
    return PhraseEntry{toks, detokenize(toks, v), {doc, s, e}};
  };
  nn::Mat tok = nn::Mat::Zero(static_cast<Eigen::Index>(v.size()), 2);
  std::vector<std::string> strings;
  for (std::size_t i = 0; i < v.size(); ++i) strings.push_back(v.str(static_cast<TokenId>(i)));
  auto good = build_table({entry("a", 1, 3), entry("b", 2, 4), entry("b", 0, 2)}, {{1, 0}, {0, 1}, {1, 1}}, tok, strings, {});
  CHECK(attribution_failures(good, store).empty());
  const auto groups = group_entries_by_surface(good);
  CHECK(groups.size() == 2);
  CHECK(groups.at(good.phrase(0).tokens) == std::vector<std::size_t>{0, 1});

  auto bad_entry = entry("a", 1, 3);
  bad_entry.source = {"b", 0, 2};
  auto gone = entry("a", 0, 2);
  gone.source.doc_id = "missing";
  const auto bad = build_table({entry("a", 0, 2), bad_entry, gone}, {{1, 0}, {0, 1}, {1, 1}}, tok, strings, {});
  CHECK(attribution_failures(bad, store) == std::vector<std::size_t>{1, 2});
}
