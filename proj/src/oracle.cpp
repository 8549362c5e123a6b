#include "phrase_lm/oracle.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <tuple>

#include <json.hpp>

#include "phrase_lm/error.hpp"

namespace phrase_lm {

namespace {

bool better_candidate(const ResolvedCandidate& a, const ResolvedCandidate& b, SegmentRule rule) {
  const auto la = a.end - a.start;
  const auto lb = b.end - b.start;
  if (rule == SegmentRule::kScoreGreedy) {
    if (a.score != b.score) return a.score > b.score;
    if (la != lb) return la > lb;
  } else {
    if (la != lb) return la > lb;
    if (a.score != b.score) return a.score > b.score;
  }
  return std::tie(a.source.doc_id, a.source.start, a.source.end) <
         std::tie(b.source.doc_id, b.source.start, b.source.end);
}

nlohmann::json step_to_json(const OracleStep& s) {
  nlohmann::json j = {{"kind", s.kind == StepKind::kPhrase ? "phrase" : "token"},
                      {"position", s.position},
                      {"length", s.length}};
  if (s.kind == StepKind::kPhrase) {
    j["source"] = {{"doc_id", s.source->doc_id}, {"start", s.source->start}, {"end", s.source->end}};
    j["score"] = s.score;
  } else {
    j["token_id"] = s.token_id;
  }
  return j;
}

OracleStep step_from_json(const nlohmann::json& j) {
  OracleStep s;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "phrase") {
    s.kind = StepKind::kPhrase;
    const auto& src = j.at("source");
    s.source = SourceSpan{src.at("doc_id").get<std::string>(), src.at("start").get<std::size_t>(),
                          src.at("end").get<std::size_t>()};
    s.score = j.value("score", 0.0);
  } else if (kind == "token") {
    s.kind = StepKind::kToken;
    s.token_id = j.at("token_id").get<TokenId>();
  } else {
    throw Error("unknown step kind '" + kind + "'");
  }
  s.position = j.at("position").get<std::size_t>();
  s.length = j.at("length").get<std::size_t>();
  return s;
}

}  // namespace

std::vector<OracleStep> segment_greedy(std::span<const TokenId> text, const std::vector<ResolvedCandidate>& resolved,
                                       SegmentRule rule, std::size_t from) {
  const std::size_t n = text.size();
  std::vector<const ResolvedCandidate*> best(n, nullptr);
  for (const auto& c : resolved) {
    if (c.start < from || c.end > n || c.end - c.start < 2) continue;
    auto& slot = best[c.start];
    if (!slot || better_candidate(c, *slot, rule)) slot = &c;
  }
  std::vector<OracleStep> steps;
  for (std::size_t i = from; i < n;) {
    OracleStep s;
    s.position = i;
    if (const auto* c = best[i]) {
      s.kind = StepKind::kPhrase;
      s.length = c->end - c->start;
      s.source = c->source;
      s.score = c->score;
    } else {
      s.kind = StepKind::kToken;
      s.length = 1;
      s.token_id = text[i];
    }
    i += s.length;
    steps.push_back(std::move(s));
  }
  return steps;
}

OraclePath segment_path(const std::string& doc_id, std::span<const TokenId> text,
                        const std::vector<ResolvedCandidate>& resolved, SegmentRule rule) {
  return {doc_id, segment_greedy(text, resolved, rule)};
}

void validate_path(const OraclePath& path, std::optional<std::span<const TokenId>> text) {
  std::size_t pos = 0;
  for (std::size_t i = 0; i < path.steps.size(); ++i) {
    const auto& s = path.steps[i];
    const auto where = "oracle path '" + path.doc_id + "' step " + std::to_string(i);
    if (s.position != pos) {
      throw Error(where + (s.position < pos ? " overlaps the previous step" : " leaves a gap"));
    }
    if (s.kind == StepKind::kToken && s.length != 1) throw Error(where + ": token step must have length 1");
    if (s.kind == StepKind::kPhrase) {
      if (s.length < 2) throw Error(where + ": phrase step shorter than 2 tokens");
      if (!s.source || s.source->end - s.source->start != s.length) throw Error(where + ": phrase source mismatch");
    }
    if (text) {
      if (pos + s.length > text->size()) throw Error(where + " runs past the end of the text");
      if (s.kind == StepKind::kToken && (*text)[pos] != s.token_id) throw Error(where + ": token id mismatch");
    }
    pos += s.length;
  }
  if (text && pos != text->size()) throw Error("oracle path '" + path.doc_id + "' does not cover its text");
}

std::vector<ResolvedCandidate> resolve_candidates(const Document& train_doc,
                                                  const std::vector<PhraseCandidate>& candidates,
                                                  const PhraseTable& table, const SurfaceGroups& groups,
                                                  const DocumentStore& support, const nn::Model& model,
                                                  std::size_t shortlist) {
  std::vector<ResolvedCandidate> out;
  std::map<std::size_t, nn::Mat> block_states;
  for (const auto& cand : candidates) {
    if (cand.span.doc_id != train_doc.id) continue;
    auto git = groups.find(cand.tokens);
    if (git == groups.end()) continue;
    const std::size_t b = train_doc.block_of(cand.span.start);
    const auto& block = train_doc.blocks[b];
    if (!block.contains(cand.span.start, cand.span.end)) continue;
    const std::span<const TokenId> block_tokens(train_doc.tokens.data() + block.start, block.size());
    auto sit = block_states.find(b);
    if (sit == block_states.end()) sit = block_states.emplace(b, model.encode_block(block_tokens)).first;
    const auto train_vec =
        to_query(model.phrase_from_states(sit->second, cand.span.start - block.start, cand.span.end - block.start));

    std::vector<Occurrence> group;
    group.reserve(git->second.size());
    for (std::size_t id : git->second) {
      const auto& e = table.phrase(id);
      const Document* src = support.find(e.source.doc_id);
      if (!src) throw Error("phrase entry " + std::to_string(id) + " references unknown document '" + e.source.doc_id + "'");
      const auto& sb = src->blocks[src->block_of(e.source.start)];
      group.push_back({e.source, {src->tokens.data() + sb.start, sb.size()}, table.embedding(id)});
    }
    const Occurrence train{{train_doc.id, cand.span.start, cand.span.end}, block_tokens, train_vec};
    if (auto m = best_source(train, group, shortlist)) {
      out.push_back({cand.span.start, cand.span.end, group[m->index].span, m->semantic});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_oracle(std::ostream& out, const std::vector<OraclePath>& paths) {
  for (const auto& p : paths) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : p.steps) steps.push_back(step_to_json(s));
    out << nlohmann::json({{"doc_id", p.doc_id}, {"steps", steps}}).dump() << '\n';
  }
}

void write_oracle(const std::filesystem::path& file, const std::vector<OraclePath>& paths) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write oracle " + file.string());
  write_oracle(out, paths);
}

std::vector<OraclePath> read_oracle(std::istream& in) {
  std::vector<OraclePath> paths;
  std::string line;
  std::size_t record = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      OraclePath p;
      p.doc_id = j.at("doc_id").get<std::string>();
      for (const auto& s : j.at("steps")) p.steps.push_back(step_from_json(s));
      validate_path(p);
      paths.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw ParseError("oracle record " + std::to_string(record) + ": " + e.what(), record);
    }
    ++record;
  }
  return paths;
}

std::vector<OraclePath> read_oracle(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot read oracle " + file.string());
  return read_oracle(in);
}

void write_resolved(const std::filesystem::path& file, const std::vector<std::string>& doc_ids,
                    const std::vector<std::vector<ResolvedCandidate>>& resolved) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  for (std::size_t i = 0; i < doc_ids.size(); ++i) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& c : resolved[i]) {
      items.push_back({{"start", c.start},
                       {"end", c.end},
                       {"source", {{"doc_id", c.source.doc_id}, {"start", c.source.start}, {"end", c.source.end}}},
                       {"score", c.score}});
    }
    out << nlohmann::json({{"doc_id", doc_ids[i]}, {"candidates", items}}).dump() << '\n';
  }
}

std::vector<std::pair<std::string, std::vector<ResolvedCandidate>>> read_resolved(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot read " + file.string());
  std::vector<std::pair<std::string, std::vector<ResolvedCandidate>>> out;
  std::string line;
  std::size_t record = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      std::vector<ResolvedCandidate> items;
      for (const auto& c : j.at("candidates")) {
        const auto& s = c.at("source");
        items.push_back({c.at("start").get<std::size_t>(), c.at("end").get<std::size_t>(),
                         {s.at("doc_id").get<std::string>(), s.at("start").get<std::size_t>(),
                          s.at("end").get<std::size_t>()},
                         c.at("score").get<double>()});
      }
      out.emplace_back(j.at("doc_id").get<std::string>(), std::move(items));
    } catch (const std::exception& e) {
      throw ParseError("resolved record " + std::to_string(record) + ": " + e.what(), record);
    }
    ++record;
  }
  return out;
}

}  // namespace phrase_lm
