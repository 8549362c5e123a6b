#include "phrase_lm/mc_datasets.hpp"

#include <fstream>
#include <json.hpp>

#include "phrase_lm/error.hpp"
#include "phrase_lm/parallel.hpp"

namespace phrase_lm {

namespace {

bool single_word(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return false;
  const auto b = s.find_first_of(" \t\r\n", a);
  return b == std::string::npos || s.find_first_not_of(" \t\r\n", b) == std::string::npos;
}

}  // namespace

std::vector<McInstance> load_mc(std::istream& in, const McLoadOptions& opts) {
  std::vector<McInstance> out;
  std::string line;
  std::size_t record = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "mc record " + std::to_string(record);
    McInstance inst;
    try {
      const auto j = nlohmann::json::parse(line);
      inst.question = j.at("question").get<std::string>();
      inst.options = j.at("options").get<std::vector<std::string>>();
      const auto ans = j.at("answer").get<long long>();
      if (inst.options.size() < 2) throw ParseError(where + ": fewer than two options", record);
      if (ans < 0 || static_cast<std::size_t>(ans) >= inst.options.size()) {
        throw ParseError(where + ": answer index " + std::to_string(ans) + " out of range", record);
      }
      inst.answer = static_cast<std::size_t>(ans);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what(), record);
    }
    ++record;
    if (opts.drop_single_word && std::all_of(inst.options.begin(), inst.options.end(), single_word)) continue;
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<McInstance> load_mc(const std::filesystem::path& path, const McLoadOptions& opts) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return load_mc(in, opts);
}

McReport evaluate_mc(const std::vector<McInstance>& instances, const nn::Model& model, const PhraseTable& table,
                     const TokenVocab& vocab, const GenerationConfig& cfg) {
  McReport rep;
  rep.results.resize(instances.size());
  GenerationConfig inner = cfg;
  inner.threads = 1;
  parallel_for(instances.size(), cfg.threads, [&](std::size_t i) {
    const auto& inst = instances[i];
    const auto q = tokenize(inst.question, vocab);
    std::vector<std::vector<TokenId>> opts;
    for (const auto& o : inst.options) opts.push_back(tokenize(o, vocab));
    const auto s = score_options(q, opts, model, table, inner);
    rep.results[i] = {s.chosen, s.chosen == inst.answer, s.scores};
  });
  std::size_t correct = 0;
  for (const auto& r : rep.results) correct += r.correct;
  if (!instances.empty()) rep.accuracy = static_cast<double>(correct) / static_cast<double>(instances.size());
  return rep;
}

}  // namespace phrase_lm
