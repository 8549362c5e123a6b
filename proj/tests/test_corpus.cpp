#include <doctest.h>

#include <sstream>

#include "helpers.hpp"
#include "phrase_lm/corpus.hpp"
#include "phrase_lm/error.hpp"

using namespace phrase_lm;

TEST_CASE("ingest: empty input gives an empty store") {
  std::istringstream in("");
  TokenVocab v;
  CHECK(ingest_corpus(in, v).size() == 0);
}

TEST_CASE("ingest: duplicate ids are rejected by name") {
  std::istringstream in(R"({"id":"a","text":"x y"}
{"id":"a","text":"z"}
)");
  TokenVocab v;
  try {
    ingest_corpus(in, v);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("'a'") != std::string::npos);
  }
}

TEST_CASE("ingest: file order is preserved") {
  std::string body;
  for (int i = 0; i < 29; ++i) body += R"({"id":"d)" + std::to_string(i) + R"(","text":"t )" + std::to_string(i) + "\"}\n";
  std::istringstream in(body);
  TokenVocab v;
  const auto store = ingest_corpus(in, v);
  REQUIRE(store.size() == 29);
  for (int i = 0; i < 29; ++i) CHECK(store[static_cast<std::size_t>(i)].id == "d" + std::to_string(i));
}

TEST_CASE("ingest: malformed record reports its line") {
  std::istringstream in("{\"id\":\"a\",\"text\":\"x\"}\n\nnot json\n");
  TokenVocab v;
  try {
    ingest_corpus(in, v);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.record() == 3);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  std::istringstream missing("{\"id\":\"a\"}\n");
  CHECK_THROWS_AS(ingest_corpus(missing, v), ParseError);
}

TEST_CASE("split_blocks: word-count arithmetic") {
  TokenVocab v;
  auto d300 = make_document("a", testutil::words(300), v, true);
  const auto b = split_blocks(d300, 128);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 128);
  CHECK(b[1].size() == 128);
  CHECK(b[2].size() == 44);
  CHECK(split_blocks(make_document("e", "", v, true), 128).empty());
  CHECK(split_blocks(make_document("x", testutil::words(128), v, true), 128).size() == 1);
  CHECK_THROWS_AS(split_blocks(d300, 0), ConfigError);
}

TEST_CASE("split_blocks: counts words, not punctuation tokens") {
  TokenVocab v;
  // 4 words, 6 tokens; blocks of 2 words
  const auto d = make_document("p", "a, b. c d!", v, true, 2);
  REQUIRE(d.blocks.size() == 2);
  CHECK(d.blocks[0] == BlockInterval{0, 4});
  CHECK(d.blocks[1] == BlockInterval{4, 7});
}

TEST_CASE("blocks are disjoint and cover the document") {
  TokenVocab v;
  const auto d = make_document("c", "one, two three. four (five) six seven; eight nine ten", v, true, 3);
  std::vector<TokenId> rebuilt;
  std::size_t pos = 0;
  for (const auto& b : d.blocks) {
    CHECK(b.start == pos);
    CHECK(b.size() > 0);
    rebuilt.insert(rebuilt.end(), d.tokens.begin() + static_cast<std::ptrdiff_t>(b.start),
                   d.tokens.begin() + static_cast<std::ptrdiff_t>(b.end));
    pos = b.end;
  }
  CHECK(rebuilt == d.tokens);
  for (std::size_t i = 0; i < d.tokens.size(); ++i) CHECK(d.blocks[d.block_of(i)].contains(i, i + 1));
}

TEST_CASE("tokenize: whitespace words with detached punctuation") {
  TokenVocab v;
  CHECK(tokenize("", v).empty());
  CHECK(split_tokens("The moon rises").size() == 3);
  CHECK(split_tokens("rises.") == std::vector<std::string>{"rises", "."});
  CHECK(split_tokens("((hi))") == std::vector<std::string>{"(", "(", "hi", ")", ")"});
  CHECK(split_tokens("don't") == std::vector<std::string>{"don't"});
  CHECK(split_tokens("  a \t b\n") == std::vector<std::string>{"a", "b"});
}

TEST_CASE("tokenize: unknown words map to UNK and known words round-trip") {
  TokenVocab v;
  make_document("a", "the moon rises.", v, true);
  const auto ids = tokenize("the moon sets.", v);
  REQUIRE(ids.size() == 4);
  CHECK(ids[2] == TokenVocab::kUnk);
  CHECK(detokenize(tokenize("the moon rises .", v), v) == "the moon rises .");
  CHECK(tokenize("the moon", v) == tokenize("the moon", v));
}

TEST_CASE("vocab: reserved ids, bijection and persistence") {
  TokenVocab v;
  CHECK(v.str(TokenVocab::kBos) == "<bos>");
  CHECK(v.str(TokenVocab::kUnk) == "<unk>");
  make_document("a", "alpha beta gamma, alpha", v, true);
  for (TokenId i = 0; i < v.size(); ++i) CHECK(v.lookup(v.str(i)) == i);
  const auto path = std::filesystem::temp_directory_path() / "plm_test_vocab.txt";
  v.save(path);
  const auto w = TokenVocab::load(path);
  REQUIRE(w.size() == v.size());
  for (TokenId i = 0; i < v.size(); ++i) CHECK(w.str(i) == v.str(i));
  std::filesystem::remove(path);
}

TEST_CASE("store: duplicate add and lookups") {
  TokenVocab v;
  auto store = testutil::store_of({{"a", "x y"}, {"b", "y z"}}, v);
  CHECK(store.find("b")->id == "b");
  CHECK(store.find("c") == nullptr);
  CHECK(store.index_of("b") == 1u);
  CHECK_THROWS_AS(store.add(make_document("a", "q", v, true)), Error);
  CHECK(store.block_count() == 2);
}
