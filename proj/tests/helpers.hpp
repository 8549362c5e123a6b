#pragma once

#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "phrase_lm/corpus.hpp"

namespace testutil {

inline phrase_lm::DocumentStore store_of(const std::vector<std::pair<std::string, std::string>>& docs,
                                         phrase_lm::TokenVocab& vocab, std::size_t max_words = 128) {
  phrase_lm::DocumentStore store;
  for (const auto& [id, text] : docs) store.add(phrase_lm::make_document(id, text, vocab, true, max_words));
  return store;
}

inline std::string words(std::size_t n, const std::string& stem = "w") {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += stem + std::to_string(i);
  }
  return s;
}

}  // namespace testutil
