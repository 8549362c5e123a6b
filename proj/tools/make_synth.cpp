// Writes the planted-phrase synthetic corpus (corpus, spans, mc instances).
#include <CLI11.hpp>
#include <iostream>

#include "phrase_lm/synth.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate the planted-phrase synthetic corpus"};
  phrase_lm::SynthConfig cfg;
  std::string out = "data/synth";
  app.add_option("--out-dir", out, "Output directory")->capture_default_str();
  app.add_option("--docs", cfg.docs, "Documents")->capture_default_str();
  app.add_option("--phrases", cfg.phrases, "Planted phrases")->capture_default_str();
  app.add_option("--filler-words", cfg.filler_words, "Filler vocabulary size")->capture_default_str();
  app.add_option("--mc", cfg.mc_instances, "Multiple-choice instances")->capture_default_str();
  app.add_option("--id-prefix", cfg.id_prefix, "Document id prefix")->capture_default_str();
  app.add_option("--seed", cfg.seed, "Seed")->capture_default_str();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  try {
    phrase_lm::write_synthetic(phrase_lm::make_synthetic(cfg), out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
