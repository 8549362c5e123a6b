#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "helpers.hpp"
#include "phrase_lm/error.hpp"
#include "phrase_lm/oracle.hpp"

using namespace phrase_lm;

namespace {

std::vector<TokenId> ids(std::size_t n) {
  std::vector<TokenId> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<TokenId>(10 + i);
  return t;
}

ResolvedCandidate rc(std::size_t s, std::size_t e, std::string doc, double score) {
  return {s, e, {std::move(doc), 100 + s, 100 + e}, score};
}

}  // namespace

TEST_CASE("segment_greedy: no candidates gives token steps") {
  const auto t = ids(5);
  const auto steps = segment_greedy(t, {});
  REQUIRE(steps.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(steps[i].kind == StepKind::kToken);
    CHECK(steps[i].position == i);
    CHECK(steps[i].token_id == t[i]);
  }
  CHECK(segment_greedy(std::vector<TokenId>{}, {}).empty());
}

TEST_CASE("segment_greedy: two phrases cover a six word sentence") {
  TokenVocab v;
  const auto store = testutil::store_of({{"t", "Flag burning sends a powerful message"}}, v);
  const auto& text = store[0].tokens;
  const std::vector<ResolvedCandidate> resolved = {rc(0, 2, "s1", 0.8), rc(2, 6, "s2", 0.5)};
  const auto path = segment_path("t", text, resolved);
  REQUIRE(path.steps.size() == 2);
  CHECK(path.steps[0].kind == StepKind::kPhrase);
  CHECK(path.steps[0].length == 2);
  CHECK(path.steps[1].kind == StepKind::kPhrase);
  CHECK(path.steps[1].position == 2);
  CHECK(path.steps[1].length == 4);
  CHECK(path.steps[1].source->doc_id == "s2");
  CHECK_NOTHROW(validate_path(path, std::span<const TokenId>(text)));
}

TEST_CASE("segment_greedy: a leading phrase then tokens") {
  const auto t = ids(5);
  const auto steps = segment_greedy(t, {rc(0, 2, "s", 1.0)});
  REQUIRE(steps.size() == 4);
  CHECK(steps[0].kind == StepKind::kPhrase);
  for (std::size_t i = 1; i < 4; ++i) {
    CHECK(steps[i].kind == StepKind::kToken);
    CHECK(steps[i].position == i + 1);
  }
}

TEST_CASE("segment_greedy: score, length and source tie-breaks") {
  const auto t = ids(6);
  auto steps = segment_greedy(t, {rc(0, 2, "s", 0.9), rc(0, 4, "s", 0.5)});
  CHECK(steps[0].length == 2);
  steps = segment_greedy(t, {rc(0, 2, "s", 0.5), rc(0, 4, "s", 0.5)});
  CHECK(steps[0].length == 4);
  steps = segment_greedy(t, {rc(0, 3, "b", 0.5), rc(0, 3, "a", 0.5)});
  CHECK(steps[0].source->doc_id == "a");
  steps = segment_greedy(t, {rc(0, 2, "s", 0.9), rc(0, 4, "s", 0.5)}, SegmentRule::kLengthGreedy);
  CHECK(steps[0].length == 4);
  // a candidate that starts inside a taken phrase is skipped
  steps = segment_greedy(t, {rc(0, 3, "s", 0.9), rc(2, 5, "s", 0.99)});
  REQUIRE(steps.size() == 4);
  CHECK(steps[1].kind == StepKind::kToken);
  CHECK(steps[1].position == 3);
  // starting in the middle
  steps = segment_greedy(t, {rc(0, 3, "s", 0.9), rc(4, 6, "s", 0.2)}, SegmentRule::kScoreGreedy, 2);
  REQUIRE(steps.size() == 3);
  CHECK(steps[0].position == 2);
  CHECK(steps[2].kind == StepKind::kPhrase);
}

TEST_CASE("segment_greedy: tiling and permutation invariance") {
  std::mt19937_64 rng(41);
  for (int rep = 0; rep < 200; ++rep) {
    const auto t = ids(5 + rng() % 40);
    std::vector<ResolvedCandidate> r;
    const std::size_t count = rng() % 25;
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t s = rng() % (t.size() - 1);
      const std::size_t e = std::min(t.size(), s + 2 + rng() % 5);
      r.push_back(rc(s, e, "d" + std::to_string(rng() % 3), static_cast<double>(rng() % 4) / 4.0));
    }
    const OraclePath path{"x", segment_greedy(t, r)};
    CHECK_NOTHROW(validate_path(path, std::span<const TokenId>(t)));
    std::size_t total = 0;
    for (const auto& s : path.steps) total += s.length;
    CHECK(total == t.size());
    auto shuffled = r;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(segment_greedy(t, shuffled) == path.steps);
  }
}

TEST_CASE("validate_path: rejects broken paths") {
  const auto t = ids(4);
  OraclePath p{"d", segment_greedy(t, {rc(1, 3, "s", 1.0)})};
  CHECK_NOTHROW(validate_path(p, std::span<const TokenId>(t)));
  auto gap = p;
  gap.steps.erase(gap.steps.begin() + 1);
  CHECK_THROWS_AS(validate_path(gap), Error);
  auto wrong_token = p;
  wrong_token.steps[0].token_id = 99;
  CHECK_THROWS_AS(validate_path(wrong_token, std::span<const TokenId>(t)), Error);
  auto short_phrase = p;
  short_phrase.steps[1].length = 1;
  CHECK_THROWS_AS(validate_path(short_phrase), Error);
  CHECK_THROWS_AS(validate_path(p, std::span<const TokenId>(ids(6))), Error);
}

TEST_CASE("oracle files: round trip and corrupt records") {
  std::mt19937_64 rng(43);
  std::vector<OraclePath> paths;
  for (int d = 0; d < 6; ++d) {
    const auto t = ids(3 + rng() % 12);
    std::vector<ResolvedCandidate> r;
    for (int i = 0; i < 3; ++i) {
      const std::size_t s = rng() % (t.size() - 1);
      r.push_back(rc(s, std::min(t.size(), s + 2), "src", 0.25 * i));
    }
    paths.push_back({"doc" + std::to_string(d), segment_greedy(t, r)});
  }
  std::stringstream ss;
  write_oracle(ss, paths);
  CHECK(read_oracle(ss) == paths);

  std::stringstream empty;
  write_oracle(empty, {});
  CHECK(empty.str().empty());
  CHECK(read_oracle(empty).empty());

  std::stringstream bad;
  write_oracle(bad, {paths[0], paths[1]});
  bad << R"({"doc_id":"x","steps":[{"kind":"token","position":0,"length":1,"token_id":3},)"
      << R"({"kind":"token","position":0,"length":1,"token_id":4}]})" << '\n';
  try {
    read_oracle(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.record() == 2);
    CHECK(std::string(e.what()).find("overlaps") != std::string::npos);
  }
  std::istringstream junk("{not json\n");
  CHECK_THROWS_AS(read_oracle(junk), ParseError);
}
