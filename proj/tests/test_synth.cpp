#include <doctest.h>

#include <algorithm>
#include <map>

#include "phrase_lm/corpus.hpp"

#include "phrase_lm/synth.hpp"

using namespace phrase_lm;

TEST_CASE("synthetic corpus: spans point at the planted words") {
  SynthConfig sc;
  sc.docs = 40;
  sc.mc_instances = 12;
  const auto c = make_synthetic(sc);
  REQUIRE(c.docs.size() == 40);
  std::map<std::string, std::vector<std::string>> words;
  for (const auto& d : c.docs) words[d.id] = split_tokens(d.text);
  std::size_t planted_hits = 0;
  for (const auto& s : c.spans) {
    const auto& w = words.at(s.doc_id);
    REQUIRE(s.end <= w.size());
    REQUIRE(s.start < s.end);
    std::vector<std::string> span(w.begin() + static_cast<std::ptrdiff_t>(s.start), w.begin() + static_cast<std::ptrdiff_t>(s.end));
    for (std::size_t p = 0; p < c.planted.size(); ++p) {
      if (span == c.planted[p]) {
        ++planted_hits;
        REQUIRE(s.start > 0);
        CHECK(w[s.start - 1] == c.cues[p]);
      }
    }
  }
  CHECK(planted_hits > 0);
  for (const auto& m : c.mc) {
    CHECK(m.options.size() == sc.mc_options);
    CHECK(m.answer < m.options.size());
    const auto q = split_tokens(m.question);
    const auto it = std::find(c.cues.begin(), c.cues.end(), q.back());
    REQUIRE(it != c.cues.end());
    std::string joined;
    for (const auto& x : c.planted[static_cast<std::size_t>(it - c.cues.begin())]) joined += (joined.empty() ? "" : " ") + x;
    CHECK(m.options[m.answer] == joined);
  }
  const auto again = make_synthetic(sc);
  CHECK(again.docs.back().text == c.docs.back().text);
}
