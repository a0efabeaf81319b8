// Synthetic dependency-treebank generator: deterministic English-like
// corpora (and structurally different variants) in CoNLL-U, for running
// the lab without external data.

#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "poslab/textgen.hpp"

int main(int argc, char** argv) {
  CLI::App app{"poslab-gen: synthetic dependency treebank generator"};
  int sentences = 1000;
  uint64_t seed = 1;
  std::string grammar = "en";
  std::string out;
  bool long_sentences = false;
  app.add_option("--sentences", sentences, "number of distinct sentences")->required();
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--grammar", grammar, "word-order flavor: en | sov");
  app.add_option("--out", out, "output path (CoNLL-U)")->required();
  app.add_flag("--long", long_sentences, "skew toward long multi-clause sentences");
  CLI11_PARSE(app, argc, argv);

  try {
    poslab::GrammarParams params;
    if (grammar == "en")
      params = long_sentences ? poslab::GrammarParams::english_mixed()
                              : poslab::GrammarParams::english();
    else if (grammar == "sov")
      params = poslab::GrammarParams::sov();
    else
      throw std::runtime_error("unknown grammar " + grammar);
    if (long_sentences && grammar == "sov") {
      params.p_conj = 0.45;
      params.max_conj = 4;
    }
    auto treebank = poslab::gen_treebank(sentences, seed, params);
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot open " + out);
    poslab::write_conllu(os, treebank);
    long tokens = 0;
    for (const auto& s : treebank) tokens += s.size();
    std::cerr << "wrote " << treebank.size() << " sentences (" << tokens << " tokens) to "
              << out << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
