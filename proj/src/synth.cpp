#include "phrase_lm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <random>
#include <set>

#include "phrase_lm/error.hpp"

namespace phrase_lm {

namespace {

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {  // inclusive
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

class WordMaker {
 public:
  explicit WordMaker(std::mt19937_64& rng) : rng_(rng) {}
  std::string fresh(std::size_t syllables) {
    static const std::string cons = "bdfgklmnprstvz";
    static const std::string vow = "aeiou";
    for (;;) {
      std::string w;
      for (std::size_t i = 0; i < syllables; ++i) {
        w += cons[rng_() % cons.size()];
        w += vow[rng_() % vow.size()];
      }
      if (used_.insert(w).second) return w;
    }
  }

 private:
  std::mt19937_64& rng_;
  std::set<std::string> used_;
};

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty() && w != ".") s += ' ';
    s += w;
  }
  return s;
}

}  // namespace

SynthCorpus make_synthetic(const SynthConfig& cfg) {
  if (cfg.phrases == 0 || cfg.filler_words < 8 || cfg.min_words > cfg.max_words || cfg.mc_options < 2) {
    throw ConfigError("invalid synthetic corpus configuration");
  }
  std::mt19937_64 rng(cfg.seed);
  WordMaker words(rng);
  SynthCorpus c;

  std::vector<std::string> filler;
  for (std::size_t i = 0; i < cfg.filler_words; ++i) filler.push_back(words.fresh(2));
  // Zipf-like filler frequencies
  std::vector<double> weights;
  for (std::size_t i = 0; i < filler.size(); ++i) weights.push_back(1.0 / std::pow(static_cast<double>(i + 1), 0.8));
  std::discrete_distribution<std::size_t> pick_filler(weights.begin(), weights.end());

  for (std::size_t k = 0; k < cfg.phrases; ++k) {
    std::vector<std::string> p;
    const std::size_t len = uniform(rng, 2, 4);
    for (std::size_t i = 0; i < len; ++i) p.push_back(words.fresh(3));
    c.planted.push_back(std::move(p));
    c.cues.push_back(words.fresh(3));
  }

  for (std::size_t d = 0; d < cfg.docs; ++d) {
    SynthDoc doc;
    char id[32];
    std::snprintf(id, sizeof id, "%s%04zu", cfg.id_prefix.c_str(), d);
    doc.id = id;
    std::vector<std::string> toks;
    const std::size_t target = uniform(rng, cfg.min_words, cfg.max_words);
    std::vector<ConstituentSpan> spans;
    while (toks.size() < target) {
      const std::size_t n = uniform(rng, 3, 7);
      const std::size_t sent_start = toks.size();
      for (std::size_t i = 0; i < n; ++i) toks.push_back(filler[pick_filler(rng)]);
      // an ordinary filler constituent
      if (n >= 4) {
        const std::size_t s = sent_start + uniform(rng, 0, n - 3);
        spans.push_back({doc.id, s, s + 2 + (rng() % 2), rng() % 2 ? "NP" : "VP"});
      }
      if (rng() % 3 != 0) {
        const std::size_t k = pick_filler(rng) % cfg.phrases;
        toks.push_back(c.cues[k]);
        const std::size_t s = toks.size();
        toks.insert(toks.end(), c.planted[k].begin(), c.planted[k].end());
        spans.push_back({doc.id, s, toks.size(), "NP"});
      }
      toks.push_back(".");
    }
    doc.text = join(toks);
    c.docs.push_back(std::move(doc));
    c.spans.insert(c.spans.end(), spans.begin(), spans.end());
  }

  for (std::size_t i = 0; i < cfg.mc_instances; ++i) {
    const std::size_t k = i % cfg.phrases;
    McInstance inst;
    std::vector<std::string> q;
    for (std::size_t j = 0; j < 4; ++j) q.push_back(filler[pick_filler(rng)]);
    q.push_back(c.cues[k]);
    inst.question = join(q);
    inst.answer = static_cast<std::size_t>(rng() % cfg.mc_options);
    for (std::size_t o = 0; o < cfg.mc_options; ++o) {
      if (o == inst.answer) {
        inst.options.push_back(join(c.planted[k]));
        continue;
      }
      std::vector<std::string> w;
      for (std::size_t j = 0; j < c.planted[k].size(); ++j) w.push_back(filler[rng() % filler.size()]);
      inst.options.push_back(join(w));
    }
    c.mc.push_back(std::move(inst));
  }
  return c;
}

void write_synthetic(const SynthCorpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream corpus(dir / "corpus.jsonl"), spans(dir / "spans.jsonl"), mc(dir / "mc.jsonl");
  if (!corpus || !spans || !mc) throw Error("cannot write synthetic corpus to " + dir.string());
  std::map<std::string, nlohmann::json> by_doc;
  for (const auto& s : c.spans) {
    by_doc[s.doc_id].push_back({{"start", s.start}, {"end", s.end}, {"label", s.label}});
  }
  for (const auto& d : c.docs) {
    corpus << nlohmann::json{{"id", d.id}, {"text", d.text}}.dump() << '\n';
    auto it = by_doc.find(d.id);
    spans << nlohmann::json{{"doc_id", d.id}, {"spans", it == by_doc.end() ? nlohmann::json::array() : it->second}}.dump()
          << '\n';
  }
  for (const auto& m : c.mc) {
    mc << nlohmann::json{{"question", m.question}, {"options", m.options}, {"answer", m.answer}}.dump() << '\n';
  }
}

}  // namespace phrase_lm
