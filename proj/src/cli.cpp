#include "phrase_lm/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <map>
#include <sstream>

#include "phrase_lm/error.hpp"
#include "phrase_lm/evalsuite.hpp"
#include "phrase_lm/generator.hpp"
#include "phrase_lm/mc_datasets.hpp"
#include "phrase_lm/parallel.hpp"
#include "phrase_lm/pipeline.hpp"
#include "phrase_lm/trainer.hpp"

namespace phrase_lm {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool deterministic = false;

  unsigned effective_threads() const { return deterministic ? 1 : std::max(1u, threads); }
};

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_json(const fs::path& p, const json& j) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

/// Resolved value of every option of `app` (given or default).
json resolved_options(const CLI::App& app) {
  json cfg = json::object();
  for (const CLI::Option* opt : app.get_options()) {
    if (opt->get_name() == "--help" || opt->get_name() == "--config" || opt->get_name().empty()) continue;
    std::string key = opt->get_single_name();
    if (opt->count()) {
      const auto& r = opt->results();
      if (r.size() == 1) {
        cfg[key] = r.front();
      } else {
        cfg[key] = r;
      }
    } else {
      cfg[key] = opt->get_default_str();
    }
  }
  return cfg;
}

class Manifest {
 public:
  Manifest(const CLI::App& root, const CLI::App& sub) {
    j_["command"] = sub.get_name();
    j_["global"] = resolved_options(root);
    j_["config"] = resolved_options(sub);
    j_["inputs"] = json::object();
    j_["outputs"] = json::array();
  }
  void input(const fs::path& p) { j_["inputs"][p.string()] = file_checksum(p); }
  void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
  void set(const std::string& key, json v) { j_[key] = std::move(v); }
  void write(const fs::path& p) const { write_json(p, j_); }

 private:
  json j_;
};

fs::path manifest_for(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

struct CorpusCtx {
  TokenVocab vocab;
  DocumentStore store;
};

CorpusCtx load_corpus(const fs::path& corpus, const fs::path& vocab_path, std::size_t block_words) {
  CorpusCtx c;
  c.vocab = TokenVocab::load(vocab_path);
  IngestOptions opts;
  opts.max_words = block_words;
  opts.grow_vocab = false;
  c.store = ingest_corpus(corpus, c.vocab, opts);
  return c;
}

std::pair<double, double> parse_pair(const std::string& s, const char* what) {
  const auto comma = s.find(',');
  try {
    if (comma == std::string::npos) throw std::invalid_argument(s);
    return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
  } catch (const std::exception&) {
    throw ConfigError(std::string(what) + " expects two comma-separated numbers, got '" + s + "'");
  }
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("not a number in list: '" + item + "'");
    }
  }
  return out;
}

SegmentRule parse_rule(const std::string& s) { return s == "length" ? SegmentRule::kLengthGreedy : SegmentRule::kScoreGreedy; }

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot open " + p.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) out.push_back(line);
  }
  return out;
}

json source_json(const SourceSpan& s) { return {{"doc_id", s.doc_id}, {"start", s.start}, {"end", s.end}}; }

// ---------------------------------------------------------------------------
// generation options shared by several subcommands

struct GenOpts {
  GenerationConfig cfg;
  std::size_t ivf_nlist = 0;
  std::optional<IvfIndex> ivf;

  void add(CLI::App* app, bool sampling) {
    app->add_option("--k", cfg.k, "Candidates retrieved per step")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--phi", cfg.phi, "Phrase probability threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    app->add_option("--ivf-nlist", ivf_nlist, "Use an IVF index with this many lists (0 = exact search)")
        ->capture_default_str();
    app->add_option("--nprobe", cfg.nprobe, "IVF lists probed per query")->capture_default_str();
    if (sampling) {
      app->add_option("--top-p", cfg.top_p, "Nucleus mass")->capture_default_str();
      app->add_option("--max-new-tokens", cfg.max_new_tokens, "Tokens per continuation")->capture_default_str();
    } else {
      app->add_flag("--dp-topk-only", cfg.dp_topk_only, "Restrict step distributions to the retrieved top-k");
      app->add_flag("--dp-max", cfg.dp_max_identical, "Max instead of sum over lexically identical entries");
      app->add_flag("--normalize", cfg.normalize_options, "Per-token normalization of option scores");
    }
  }

  void prepare(const PhraseTable& table, const Globals& g) {
    cfg.seed = g.seed;
    cfg.threads = g.effective_threads();
    if (ivf_nlist > 0) {
      if (ivf_nlist > table.size()) throw ConfigError("--ivf-nlist exceeds the table size");
      ivf = IvfIndex::build(table, ivf_nlist, g.seed);
      cfg.ivf = &*ivf;
    }
    cfg.validate();
  }
};

struct ModelFiles {
  fs::path vocab, table, model;

  void add(CLI::App* app) {
    app->add_option("--vocab", vocab, "Vocabulary file")->required();
    app->add_option("--table", table, "Phrase table")->required();
    app->add_option("--model", model, "Model checkpoint")->required();
  }
  void record(Manifest& m) const {
    m.input(vocab);
    m.input(table);
    m.input(model);
  }
};

struct Loaded {
  TokenVocab vocab;
  PhraseTable table;
  std::optional<nn::Model> model;
};

Loaded load_model_files(const ModelFiles& f) {
  Loaded l;
  l.vocab = TokenVocab::load(f.vocab);
  l.table = PhraseTable::load(f.table);
  l.model.emplace(nn::Model::load(f.model));
  if (l.model->config().vocab_size != l.vocab.size() || l.table.token_count() != l.vocab.size()) {
    throw Error("vocabulary, table and model disagree on the vocabulary size");
  }
  if (l.table.dim() != l.model->config().index_dim) throw Error("table and model disagree on the index dimension");
  return l;
}

json generation_json(const std::string& prefix, const GenerationRecord& rec, const double* wall_ms) {
  json steps = json::array();
  for (const auto& s : rec.steps) {
    json j{{"surface", s.surface}, {"kind", s.kind == StepKind::kPhrase ? "phrase" : "token"}, {"entry", s.entry},
           {"length", s.length}, {"probability", s.probability}};
    if (s.source) j["source"] = source_json(*s.source);
    else j["token"] = s.token_id;
    steps.push_back(std::move(j));
  }
  json j{{"prefix", prefix}, {"text", rec.text}, {"steps", steps}, {"token_rate", rec.token_rate},
         {"decode_steps", rec.decode_steps()}, {"tokens", rec.tokens.size()}};
  if (wall_ms) j["wall_ms"] = *wall_ms;
  return j;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Phrase-retrieval language model toolkit"};
  app.set_config("--config", "", "key=value file (subcommand keys as 'cmd.key' or under [cmd]); flags override it");
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Global seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->capture_default_str();
  app.add_flag("--deterministic", g.deterministic, "Serial reductions and no timing fields in outputs");

  std::function<void()> action;
  std::size_t block_words = 128;

  // ---- ingest ----
  auto* ingest = app.add_subcommand("ingest", "Tokenize a corpus and write its vocabulary");
  fs::path ing_corpus, ing_out;
  ingest->add_option("--corpus", ing_corpus, "Corpus JSONL ({\"id\", \"text\"} per line)")->required();
  ingest->add_option("--out-dir", ing_out, "Output directory")->required();
  ingest->add_option("--block-words", block_words, "Words per block")->capture_default_str();
  ingest->callback([&] {
    action = [&] {
      TokenVocab vocab;
      IngestOptions opts;
      opts.max_words = block_words;
      const auto store = ingest_corpus(ing_corpus, vocab, opts);
      fs::create_directories(ing_out);
      vocab.save(ing_out / "vocab.txt");
      std::size_t tokens = 0;
      for (const auto& d : store) tokens += d.tokens.size();
      const json stats{{"documents", store.size()}, {"tokens", tokens}, {"blocks", store.block_count()},
                       {"vocab_size", vocab.size()}};
      write_json(ing_out / "stats.json", stats);
      Manifest m(app, *ingest);
      m.input(ing_corpus);
      m.output(ing_out / "vocab.txt");
      m.output(ing_out / "stats.json");
      m.write(ing_out / "ingest.manifest.json");
      out << stats.dump() << '\n';
    };
  });

  // ---- mine-phrases ----
  auto* mine = app.add_subcommand("mine-phrases", "Filter constituent spans into phrase candidates");
  fs::path mine_corpus, mine_vocab, mine_spans, mine_out;
  std::string idf_mode = "default", idf_band = "0.5,5.0", idf_pct = "0.05,0.05";
  FilterConfig fcfg;
  mine->add_option("--corpus", mine_corpus, "Corpus JSONL")->required();
  mine->add_option("--vocab", mine_vocab, "Vocabulary file")->required();
  mine->add_option("--spans", mine_spans, "Constituent spans JSONL (fallback chunker when absent)");
  mine->add_option("--idf-mode", idf_mode, "default | uniform | percentile")
      ->capture_default_str()
      ->check(CLI::IsMember({"default", "uniform", "percentile"}));
  mine->add_option("--idf-band", idf_band, "Uniform mode: min,max idf")->capture_default_str();
  mine->add_option("--idf-percentiles", idf_pct, "Percentile mode: low,high fractions dropped")->capture_default_str();
  mine->add_option("--min-words", fcfg.min_words, "Shortest phrase")->capture_default_str();
  mine->add_option("--max-words", fcfg.max_words, "Longest phrase")->capture_default_str();
  mine->add_option("--block-words", block_words, "Words per block")->capture_default_str();
  mine->add_option("--out", mine_out, "Candidates JSONL")->required();
  mine->callback([&] {
    action = [&] {
      const auto c = load_corpus(mine_corpus, mine_vocab, block_words);
      std::vector<ConstituentSpan> spans;
      if (!mine_spans.empty()) {
        spans = load_spans(mine_spans, c.store);
      } else {
        for (const auto& d : c.store) {
          auto s = fallback_chunk(d, c.vocab, fcfg.min_words, fcfg.max_words);
          spans.insert(spans.end(), s.begin(), s.end());
        }
      }
      const auto idf = compute_idf(c.store, span_surfaces(spans, c.store, fcfg));
      if (idf_mode == "uniform") {
        const auto [lo, hi] = parse_pair(idf_band, "--idf-band");
        fcfg.thresholds = uniform_idf_thresholds(lo, hi, fcfg.min_words, fcfg.max_words);
      } else if (idf_mode == "percentile") {
        const auto [lo, hi] = parse_pair(idf_pct, "--idf-percentiles");
        fcfg.thresholds = percentile_idf_thresholds(spans, c.store, idf, fcfg, lo, hi);
      }
      const auto cands = filter_candidates(spans, c.store, c.vocab, idf, fcfg);
      ensure_parent(mine_out);
      write_candidates(mine_out, cands);
      Manifest m(app, *mine);
      m.input(mine_corpus);
      m.input(mine_vocab);
      if (!mine_spans.empty()) m.input(mine_spans);
      m.output(mine_out);
      m.set("counts", {{"spans", spans.size()}, {"candidates", cands.size()}});
      m.write(manifest_for(mine_out));
      out << json{{"spans", spans.size()}, {"candidates", cands.size()}}.dump() << '\n';
    };
  });

  // ---- build-index ----
  auto* build = app.add_subcommand("build-index", "Embed candidates into a phrase table");
  fs::path bi_corpus, bi_vocab, bi_cands, bi_model, bi_model_out, bi_out;
  std::string bi_corpus_id, precision = "f32";
  nn::ModelConfig mcfg;
  build->add_option("--corpus", bi_corpus, "Corpus JSONL")->required();
  build->add_option("--vocab", bi_vocab, "Vocabulary file")->required();
  build->add_option("--candidates", bi_cands, "Candidates JSONL")->required();
  build->add_option("--model", bi_model, "Existing checkpoint (a fresh one is initialized when absent)");
  build->add_option("--model-out", bi_model_out, "Where to write a freshly initialized checkpoint");
  build->add_option("--out", bi_out, "Table path")->required();
  build->add_option("--corpus-id", bi_corpus_id, "Corpus identifier recorded in the table");
  fs::path bi_import;
  build->add_option("--import-embeddings", bi_import, "JSONL of externally computed phrase embeddings");
  build->add_option("--block-words", block_words, "Words per block")->capture_default_str();
  build->add_option("--d-model", mcfg.d_model, "Hidden size")->capture_default_str();
  build->add_option("--index-dim", mcfg.index_dim, "Index dimension")->capture_default_str();
  build->add_option("--layers", mcfg.layers, "Transformer layers")->capture_default_str();
  build->add_option("--heads", mcfg.heads, "Attention heads")->capture_default_str();
  build->add_option("--ffn-mult", mcfg.ffn_mult, "Feed-forward width multiple")->capture_default_str();
  build->add_option("--max-prefix-len", mcfg.max_prefix_len, "Prefix window including BOS")->capture_default_str();
  build->add_option("--precision", precision, "f32 | f64")->capture_default_str()->check(CLI::IsMember({"f32", "f64"}));
  build->callback([&] {
    action = [&] {
      const auto c = load_corpus(bi_corpus, bi_vocab, block_words);
      const auto cands = read_candidates(bi_cands, c.store, c.vocab);
      Manifest m(app, *build);
      m.input(bi_corpus);
      m.input(bi_vocab);
      m.input(bi_cands);
      std::optional<nn::Model> model;
      if (!bi_model.empty()) {
        m.input(bi_model);
        model.emplace(nn::Model::load(bi_model));
        if (model->config().vocab_size != c.vocab.size()) throw Error("checkpoint vocabulary does not match --vocab");
      } else {
        mcfg.vocab_size = c.vocab.size();
        mcfg.seed = g.seed;
        mcfg.precision = precision == "f64" ? nn::Precision::kFloat64 : nn::Precision::kFloat32;
        mcfg.validate();
        model.emplace(mcfg);
        const fs::path dst = bi_model_out.empty() ? bi_out.parent_path() / "model.ckpt" : bi_model_out;
        ensure_parent(dst);
        model->save(dst);
        m.output(dst);
      }
      const std::string corpus_id = bi_corpus_id.empty() ? bi_corpus.stem().string() : bi_corpus_id;
      std::optional<EmbeddingImport> imported;
      if (!bi_import.empty()) {
        m.input(bi_import);
        imported = read_embedding_import(bi_import, model->config().index_dim);
      }
      const auto table = index_candidates(c.store, c.vocab, cands, *model, corpus_id, g.effective_threads(),
                                          imported ? &*imported : nullptr);
      ensure_parent(bi_out);
      table.save(bi_out);
      m.output(bi_out);
      m.output(sidecar_path(bi_out));
      m.set("counts", {{"phrases", table.phrase_count()}, {"tokens", table.token_count()}});
      m.write(manifest_for(bi_out));
      out << json{{"phrases", table.phrase_count()}, {"tokens", table.token_count()}, {"dim", table.dim()}}.dump()
          << '\n';
    };
  });

  // ---- index-merge ----
  auto* merge = app.add_subcommand("index-merge", "Concatenate two phrase tables");
  fs::path mg_a, mg_b, mg_out;
  bool mg_allow = false;
  merge->add_option("--a", mg_a, "First table (its token entries are kept)")->required();
  merge->add_option("--b", mg_b, "Second table")->required();
  merge->add_option("--out", mg_out, "Merged table")->required();
  merge->add_flag("--allow-encoder-mismatch", mg_allow, "Merge tables built by different phrase encoders");
  merge->callback([&] {
    action = [&] {
      const auto merged = merge_tables(PhraseTable::load(mg_a), PhraseTable::load(mg_b), mg_allow);
      ensure_parent(mg_out);
      merged.save(mg_out);
      Manifest m(app, *merge);
      m.input(mg_a);
      m.input(mg_b);
      m.output(mg_out);
      m.output(sidecar_path(mg_out));
      m.write(manifest_for(mg_out));
      out << json{{"phrases", merged.phrase_count()}, {"tokens", merged.token_count()}}.dump() << '\n';
    };
  });

  // ---- make-oracle ----
  auto* oracle = app.add_subcommand("make-oracle", "Build training oracle paths");
  fs::path or_corpus, or_vocab, or_cands, or_table, or_model, or_out, or_resolved;
  std::string or_rule = "score";
  std::size_t or_shortlist = 10;
  oracle->add_option("--corpus", or_corpus, "Corpus JSONL")->required();
  oracle->add_option("--vocab", or_vocab, "Vocabulary file")->required();
  oracle->add_option("--candidates", or_cands, "Candidates JSONL")->required();
  oracle->add_option("--table", or_table, "Phrase table")->required();
  oracle->add_option("--model", or_model, "Checkpoint (frozen phrase encoder)")->required();
  oracle->add_option("--out", or_out, "Oracle JSONL")->required();
  oracle->add_option("--resolved-out", or_resolved, "Resolved candidates JSONL (default: <out>.resolved.jsonl)");
  oracle->add_option("--segment-rule", or_rule, "score | length")->capture_default_str()->check(CLI::IsMember({"score", "length"}));
  oracle->add_option("--shortlist", or_shortlist, "Lexical shortlist size")->capture_default_str();
  oracle->add_option("--block-words", block_words, "Words per block")->capture_default_str();
  oracle->callback([&] {
    action = [&] {
      const auto c = load_corpus(or_corpus, or_vocab, block_words);
      const auto cands = read_candidates(or_cands, c.store, c.vocab);
      const auto table = PhraseTable::load(or_table);
      const auto model = nn::Model::load(or_model);
      if (table.provenance().encoder_checksum != model.phrase_encoder_checksum()) {
        throw Error("table was built with a different phrase encoder than --model");
      }
      const auto set = build_oracles(all_documents(c.store), cands, table, c.store, model, parse_rule(or_rule),
                                     or_shortlist, g.effective_threads());
      ensure_parent(or_out);
      write_oracle(or_out, set.paths);
      const fs::path res = or_resolved.empty() ? fs::path(or_out.string() + ".resolved.jsonl") : or_resolved;
      std::vector<std::string> ids;
      for (const auto* d : set.docs) ids.push_back(d->id);
      write_resolved(res, ids, set.resolved);
      std::size_t steps = 0, phrases = 0;
      for (const auto& p : set.paths) {
        for (const auto& s : p.steps) {
          ++steps;
          phrases += s.kind == StepKind::kPhrase;
        }
      }
      Manifest m(app, *oracle);
      for (const auto& p : {or_corpus, or_vocab, or_cands, or_table, or_model}) m.input(p);
      m.output(or_out);
      m.output(res);
      m.set("counts", {{"paths", set.paths.size()}, {"steps", steps}, {"phrase_steps", phrases}});
      m.write(manifest_for(or_out));
      out << json{{"paths", set.paths.size()}, {"steps", steps}, {"phrase_steps", phrases}}.dump() << '\n';
    };
  });

  // ---- train ----
  auto* trn = app.add_subcommand("train", "Train the prefix encoder with self-reinforcement rounds");
  fs::path tr_corpus, tr_vocab, tr_table, tr_model, tr_oracle, tr_resolved, tr_out_model, tr_out_table, tr_out_oracle,
      tr_metrics;
  std::size_t tr_heldout = 0;
  std::string tr_rule = "score", tr_sr_score = "model";
  TrainConfig tcfg;
  trn->add_option("--corpus", tr_corpus, "Corpus JSONL")->required();
  trn->add_option("--vocab", tr_vocab, "Vocabulary file")->required();
  trn->add_option("--table", tr_table, "Phrase table")->required();
  trn->add_option("--model", tr_model, "Initial checkpoint")->required();
  trn->add_option("--oracle", tr_oracle, "Oracle JSONL")->required();
  trn->add_option("--resolved", tr_resolved, "Resolved candidates (default: <oracle>.resolved.jsonl)");
  trn->add_option("--out-model", tr_out_model, "Trained checkpoint")->required();
  trn->add_option("--out-table", tr_out_table, "Table with refreshed token entries")->required();
  trn->add_option("--out-oracle", tr_out_oracle, "Oracle paths after self-reinforcement");
  trn->add_option("--metrics", tr_metrics, "Per-epoch metrics JSONL (default: <out-model>.metrics.jsonl)");
  trn->add_option("--heldout", tr_heldout, "Hold out the last N oracle documents for evaluation")->capture_default_str();
  trn->add_option("--block-words", block_words, "Words per block")->capture_default_str();
  trn->add_option("--alpha", tcfg.alpha, "Token loss weight")->capture_default_str();
  trn->add_option("--batch-size", tcfg.batch_size, "Documents per batch")->capture_default_str();
  trn->add_option("--epochs", tcfg.epochs, "Training epochs")->capture_default_str();
  trn->add_option("--lr", tcfg.learning_rate, "Adam learning rate")->capture_default_str();
  trn->add_option("--warmup", tcfg.warmup_steps, "Linear warm-up steps")->capture_default_str();
  trn->add_option("--hard-negatives", tcfg.hard_negatives_per_example, "Hard negatives per example")->capture_default_str();
  trn->add_flag("--in-batch-hard", tcfg.in_batch_includes_hard, "Share hard negatives across the batch");
  trn->add_option("--sr-rounds", tcfg.sr_rounds, "Self-reinforcement rounds")->capture_default_str();
  trn->add_option("--sr-k", tcfg.sr_k, "Entries retrieved per step during self-reinforcement")->capture_default_str();
  trn->add_option("--sr-score", tr_sr_score, "model | frozen")->capture_default_str()->check(CLI::IsMember({"model", "frozen"}));
  trn->add_option("--segment-rule", tr_rule, "score | length")->capture_default_str()->check(CLI::IsMember({"score", "length"}));
  trn->callback([&] {
    action = [&] {
      const auto c = load_corpus(tr_corpus, tr_vocab, block_words);
      auto table = PhraseTable::load(tr_table);
      auto model = nn::Model::load(tr_model);
      auto paths = read_oracle(tr_oracle);
      const fs::path res_path = tr_resolved.empty() ? fs::path(tr_oracle.string() + ".resolved.jsonl") : tr_resolved;
      const auto res = read_resolved(res_path);
      std::map<std::string, const std::vector<ResolvedCandidate>*> res_by_id;
      for (const auto& [id, r] : res) res_by_id[id] = &r;
      if (tr_heldout >= paths.size() && tr_heldout > 0) throw ConfigError("--heldout leaves no training documents");
      std::vector<OraclePath> held(paths.end() - static_cast<std::ptrdiff_t>(tr_heldout), paths.end());
      paths.resize(paths.size() - tr_heldout);
      const auto docs_of = [&](const std::vector<OraclePath>& ps) {
        std::vector<const Document*> out_docs;
        for (const auto& p : ps) {
          const Document* d = c.store.find(p.doc_id);
          if (!d) throw Error("oracle references unknown document '" + p.doc_id + "'");
          out_docs.push_back(d);
        }
        return out_docs;
      };
      const auto train_docs = docs_of(paths);
      const auto held_docs = docs_of(held);
      std::vector<std::vector<ResolvedCandidate>> resolved;
      for (const auto& p : paths) {
        auto it = res_by_id.find(p.doc_id);
        if (it == res_by_id.end()) throw Error("no resolved candidates for document '" + p.doc_id + "'");
        resolved.push_back(*it->second);
      }
      tcfg.seed = g.seed;
      tcfg.threads = g.effective_threads();
      tcfg.segment_rule = parse_rule(tr_rule);
      tcfg.sr_score = tr_sr_score == "frozen" ? SrScore::kFrozen : SrScore::kModel;

      const fs::path metrics_path = tr_metrics.empty() ? fs::path(tr_out_model.string() + ".metrics.jsonl") : tr_metrics;
      ensure_parent(metrics_path);
      std::ofstream metrics(metrics_path, std::ios::binary);
      if (!metrics) throw Error("cannot write " + metrics_path.string());
      const auto result = train(paths, train_docs, resolved, table, model, tcfg, [&](const EpochMetrics& e) {
        json j{{"epoch", e.epoch}, {"phrase_loss", e.phrase_loss}, {"token_loss", e.token_loss}, {"combined", e.combined}};
        if (e.sr_update_rate >= 0) j["sr_update_rate"] = e.sr_update_rate;
        metrics << j.dump() << '\n';
        out << j.dump() << '\n';
      });
      json summary{{"sr_rounds", json::array()}};
      for (const auto& s : result.sr_rounds) {
        summary["sr_rounds"].push_back({{"visited", s.steps_visited}, {"replaced", s.replaced}});
      }
      if (!held.empty()) {
        const auto acc = evaluate_retrieval(held, held_docs, table, model);
        summary["heldout"] = {{"steps", acc.steps}, {"accuracy", acc.accuracy}, {"baseline", acc.baseline}};
      }
      metrics << summary.dump() << '\n';
      out << summary.dump() << '\n';

      ensure_parent(tr_out_model);
      model.save(tr_out_model);
      ensure_parent(tr_out_table);
      table.save(tr_out_table);
      Manifest m(app, *trn);
      for (const auto& p : {tr_corpus, tr_vocab, tr_table, tr_model, tr_oracle, res_path}) m.input(p);
      m.output(tr_out_model);
      m.output(tr_out_table);
      m.output(sidecar_path(tr_out_table));
      m.output(metrics_path);
      if (!tr_out_oracle.empty()) {
        ensure_parent(tr_out_oracle);
        write_oracle(tr_out_oracle, paths);
        m.output(tr_out_oracle);
      }
      m.write(manifest_for(tr_out_model));
    };
  });

  // ---- generate ----
  auto* gen = app.add_subcommand("generate", "Sample continuations with source attribution");
  ModelFiles gen_files;
  GenOpts gen_opts;
  std::vector<std::string> gen_prefix;
  fs::path gen_prefixes, gen_out, gen_corpus;
  gen_files.add(gen);
  gen_opts.add(gen, true);
  gen->add_option("--prefix", gen_prefix, "Prompt text (repeatable)");
  gen->add_option("--prefixes", gen_prefixes, "File with one prompt per line");
  gen->add_option("--out", gen_out, "Generation records JSONL")->required();
  gen->add_option("--corpus", gen_corpus, "Corpus used to verify every phrase step's source");
  gen->add_option("--block-words", block_words, "Words per block")->capture_default_str();
  gen->callback([&] {
    action = [&] {
      auto l = load_model_files(gen_files);
      gen_opts.prepare(l.table, g);
      std::vector<std::string> prompts = gen_prefix;
      if (!gen_prefixes.empty()) {
        const auto lines = read_lines(gen_prefixes);
        prompts.insert(prompts.end(), lines.begin(), lines.end());
      }
      if (prompts.empty()) throw ConfigError("give --prefix or --prefixes");
      std::optional<CorpusCtx> corpus;
      if (!gen_corpus.empty()) corpus = load_corpus(gen_corpus, gen_files.vocab, block_words);
      std::vector<GenerationRecord> recs(prompts.size());
      std::vector<double> wall(prompts.size());
      parallel_for(prompts.size(), g.effective_threads(), [&](std::size_t i) {
        GenerationConfig c = gen_opts.cfg;
        c.seed = gen_opts.cfg.seed + i;
        const auto t0 = std::chrono::steady_clock::now();
        recs[i] = generate(tokenize(prompts[i], l.vocab), *l.model, l.table, l.vocab, c);
        wall[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      });
      std::size_t attributed = 0;
      if (corpus) {
        for (const auto& r : recs) {
          for (const auto& s : r.steps) {
            if (!s.source) continue;
            const Document* d = corpus->store.find(s.source->doc_id);
            if (!d || s.source->end > d->tokens.size() ||
                detokenize(std::span<const TokenId>(d->tokens).subspan(s.source->start, s.source->end - s.source->start),
                           l.vocab) != s.surface) {
              throw Error("phrase step '" + s.surface + "' does not match its source in " + s.source->doc_id);
            }
            ++attributed;
          }
        }
      }
      ensure_parent(gen_out);
      std::ofstream o(gen_out, std::ios::binary);
      if (!o) throw Error("cannot write " + gen_out.string());
      for (std::size_t i = 0; i < recs.size(); ++i) {
        o << generation_json(prompts[i], recs[i], g.deterministic ? nullptr : &wall[i]).dump() << '\n';
      }
      Manifest m(app, *gen);
      gen_files.record(m);
      if (!gen_prefixes.empty()) m.input(gen_prefixes);
      if (!gen_corpus.empty()) {
        m.input(gen_corpus);
        m.set("attributed_phrase_steps", attributed);
      }
      m.output(gen_out);
      m.write(manifest_for(gen_out));
      out << json{{"generations", recs.size()}, {"attributed_phrase_steps", attributed}}.dump() << '\n';
    };
  });

  // ---- likelihood ----
  auto* lik = app.add_subcommand("likelihood", "Log-likelihood summed over segmentations");
  ModelFiles lik_files;
  GenOpts lik_opts;
  std::string lik_text, lik_prefix;
  fs::path lik_out;
  lik_files.add(lik);
  lik_opts.add(lik, false);
  lik->add_option("--text", lik_text, "Text to score")->required();
  lik->add_option("--prefix", lik_prefix, "Conditioning prefix");
  lik->add_option("--out", lik_out, "Write the result here as well as to stdout");
  lik->callback([&] {
    action = [&] {
      auto l = load_model_files(lik_files);
      lik_opts.prepare(l.table, g);
      const auto text = tokenize(lik_text, l.vocab);
      DpStats stats;
      const double ll = dp_likelihood(text, tokenize(lik_prefix, l.vocab), *l.model, l.table, lik_opts.cfg, &stats);
      const json j{{"log_likelihood", ll}, {"tokens", text.size()}, {"distributions", stats.distributions}};
      out << j.dump() << '\n';
      if (!lik_out.empty()) {
        write_json(lik_out, j);
        Manifest m(app, *lik);
        lik_files.record(m);
        m.output(lik_out);
        m.write(manifest_for(lik_out));
      }
    };
  });

  // ---- score-options ----
  auto* so = app.add_subcommand("score-options", "Pick the most likely answer option");
  ModelFiles so_files;
  GenOpts so_opts;
  std::string so_question;
  std::vector<std::string> so_options;
  fs::path so_out;
  so_files.add(so);
  so_opts.add(so, false);
  so->add_option("--question", so_question, "Question text")->required();
  so->add_option("--option", so_options, "Answer option (repeat, at least two)")->required();
  so->add_option("--out", so_out, "Write the result here as well as to stdout");
  so->callback([&] {
    action = [&] {
      auto l = load_model_files(so_files);
      so_opts.prepare(l.table, g);
      std::vector<std::vector<TokenId>> opts;
      for (const auto& o : so_options) opts.push_back(tokenize(o, l.vocab));
      const auto r = score_options(tokenize(so_question, l.vocab), opts, *l.model, l.table, so_opts.cfg);
      const json j{{"chosen", r.chosen}, {"scores", r.scores}};
      out << j.dump() << '\n';
      if (!so_out.empty()) {
        write_json(so_out, j);
        Manifest m(app, *so);
        so_files.record(m);
        m.output(so_out);
        m.write(manifest_for(so_out));
      }
    };
  });

  // ---- eval-mc ----
  auto* emc = app.add_subcommand("eval-mc", "Multiple-choice accuracy through option scoring");
  ModelFiles emc_files;
  GenOpts emc_opts;
  fs::path emc_data, emc_out;
  McLoadOptions emc_load;
  emc_files.add(emc);
  emc_opts.add(emc, false);
  emc->add_option("--data", emc_data, "Instances JSONL")->required();
  emc->add_flag("--drop-single-word", emc_load.drop_single_word, "Skip instances whose options are all one word");
  emc->add_option("--out", emc_out, "Report JSON")->required();
  emc->callback([&] {
    action = [&] {
      auto l = load_model_files(emc_files);
      emc_opts.prepare(l.table, g);
      const auto inst = load_mc(emc_data, emc_load);
      const auto rep = evaluate_mc(inst, *l.model, l.table, l.vocab, emc_opts.cfg);
      json per = json::array();
      for (std::size_t i = 0; i < rep.results.size(); ++i) {
        per.push_back({{"index", i}, {"chosen", rep.results[i].chosen}, {"answer", inst[i].answer},
                       {"correct", rep.results[i].correct}, {"scores", rep.results[i].scores}});
      }
      write_json(emc_out, {{"instances", inst.size()}, {"accuracy", rep.accuracy}, {"results", per}});
      Manifest m(app, *emc);
      emc_files.record(m);
      m.input(emc_data);
      m.output(emc_out);
      m.write(manifest_for(emc_out));
      out << json{{"instances", inst.size()}, {"accuracy", rep.accuracy}}.dump() << '\n';
    };
  });

  // ---- eval-gen ----
  auto* egen = app.add_subcommand("eval-gen", "Diversity, coherence and token rate of generations");
  fs::path eg_gens, eg_vocab, eg_model, eg_out;
  egen->add_option("--generations", eg_gens, "Generation records JSONL")->required();
  egen->add_option("--vocab", eg_vocab, "Vocabulary file")->required();
  egen->add_option("--model", eg_model, "Scoring checkpoint (next-token head)")->required();
  egen->add_option("--out", eg_out, "Report JSON")->required();
  egen->callback([&] {
    action = [&] {
      const auto vocab = TokenVocab::load(eg_vocab);
      const auto model = nn::Model::load(eg_model);
      std::ifstream in(eg_gens);
      if (!in) throw Error("cannot open " + eg_gens.string());
      json per = json::array();
      double div = 0, coh = 0, rate = 0, rep[3] = {0, 0, 0};
      std::size_t n = 0, short_texts = 0;
      std::string line;
      while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json r;
        try {
          r = json::parse(line);
        } catch (const json::exception& e) {
          throw ParseError("generation record " + std::to_string(n) + ": " + e.what(), n);
        }
        const auto text = r.at("text").get<std::string>();
        const auto toks = split_tokens(text);
        const auto d = diversity(std::span<const std::string>(toks));
        const auto cont = tokenize(text, vocab);
        const double c = coherence(tokenize(r.value("prefix", std::string{}), vocab), cont, model);
        per.push_back({{"diversity", d.value}, {"rep_2", d.rep[0]}, {"rep_3", d.rep[1]}, {"rep_4", d.rep[2]},
                       {"coherence", c}, {"token_rate", r.value("token_rate", 0.0)}, {"too_short", d.too_short}});
        div += d.value;
        coh += c;
        rate += r.value("token_rate", 0.0);
        for (int k = 0; k < 3; ++k) rep[k] += d.rep[k];
        short_texts += d.too_short;
        ++n;
      }
      if (n == 0) throw Error("no generation records in " + eg_gens.string());
      const double dn = static_cast<double>(n);
      const json summary{{"records", n},           {"diversity", div / dn},     {"rep_2", rep[0] / dn},
                         {"rep_3", rep[1] / dn},   {"rep_4", rep[2] / dn},      {"coherence", coh / dn},
                         {"token_rate", rate / dn}, {"too_short", short_texts}};
      write_json(eg_out, {{"summary", summary}, {"records", per}});
      Manifest m(app, *egen);
      m.input(eg_gens);
      m.input(eg_vocab);
      m.input(eg_model);
      m.output(eg_out);
      m.write(manifest_for(eg_out));
      out << summary.dump() << '\n';
    };
  });

  // ---- bench ----
  auto* bench = app.add_subcommand("bench", "Decode latency and token rate over a phi sweep");
  ModelFiles bn_files;
  GenOpts bn_opts;
  std::vector<std::string> bn_prefix;
  fs::path bn_prefixes, bn_out;
  std::string bn_sweep = "0.0,0.2,0.4,0.6,0.8";
  std::size_t bn_warmup = 1;
  bn_files.add(bench);
  bn_opts.add(bench, true);
  bench->add_option("--prefix", bn_prefix, "Prompt text (repeatable)");
  bench->add_option("--prefixes", bn_prefixes, "File with one prompt per line");
  bench->add_option("--phi-sweep", bn_sweep, "Comma-separated thresholds")->capture_default_str();
  bench->add_option("--warmup", bn_warmup, "Untimed warm-up runs")->capture_default_str();
  bench->add_option("--out", bn_out, "Report JSON")->required();
  bench->callback([&] {
    action = [&] {
      auto l = load_model_files(bn_files);
      bn_opts.prepare(l.table, g);
      std::vector<std::string> prompts = bn_prefix;
      if (!bn_prefixes.empty()) {
        const auto lines = read_lines(bn_prefixes);
        prompts.insert(prompts.end(), lines.begin(), lines.end());
      }
      if (prompts.empty()) throw ConfigError("give --prefix or --prefixes");
      std::vector<std::vector<TokenId>> toks;
      for (const auto& p : prompts) toks.push_back(tokenize(p, l.vocab));
      const auto rows = phi_sweep(toks, *l.model, l.table, l.vocab, bn_opts.cfg, parse_list(bn_sweep), bn_warmup);
      json jr = json::array();
      for (const auto& r : rows) {
        json runs = json::array();
        for (const auto& x : r.report.runs) {
          runs.push_back({{"seconds", x.seconds}, {"token_rate", x.token_rate}, {"decode_steps", x.decode_steps},
                          {"tokens", x.tokens}, {"phrase_extra", x.phrase_extra}, {"diversity", x.diversity}});
        }
        jr.push_back({{"phi", r.phi}, {"mean_seconds", r.report.mean_seconds}, {"p50_seconds", r.report.p50_seconds},
                      {"p95_seconds", r.report.p95_seconds}, {"mean_token_rate", r.report.mean_token_rate},
                      {"mean_decode_steps", r.report.mean_decode_steps}, {"mean_diversity", r.report.mean_diversity},
                      {"runs", runs}});
      }
      write_json(bn_out, {{"sweep", jr}});
      Manifest m(app, *bench);
      bn_files.record(m);
      if (!bn_prefixes.empty()) m.input(bn_prefixes);
      m.output(bn_out);
      m.write(manifest_for(bn_out));
      out << format_sweep(rows);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  try {
    if (action) action();
    return 0;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace phrase_lm
