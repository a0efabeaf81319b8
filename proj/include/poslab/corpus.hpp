#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "poslab/bpe.hpp"
#include "poslab/conllu.hpp"
#include "poslab/encoder.hpp"
#include "poslab/order_model.hpp"
#include "poslab/rng.hpp"

namespace poslab {

// Aligned (L1, L2) sentence pairs over a joint shifted vocabulary. L1
// subwords occupy global ids [specials, specials+V); L2 the next V ids.
// Special tokens are shared and never shifted, so the gold word alignment
// is recoverable as id <-> id + V for every non-special token.
struct PairedCorpus {
  int vocab_per_lang = 0;  // V
  std::string language_tag;  // e.g. "en" or "en~sov"
  std::string mode;          // "copy" or "reorder"
  uint64_t seed = 0;
  std::vector<std::vector<int>> l1, l2;

  int pair_count() const { return static_cast<int>(l1.size()); }
  int total_vocab() const { return kNumSpecials + 2 * vocab_per_lang; }

  // De-shift an L2 id back into L1 space; specials map to themselves.
  int unshift(int id) const {
    return id >= kNumSpecials + vocab_per_lang ? id - vocab_per_lang : id;
  }
};

enum class CorpusMode { kCopy, kReorder };

namespace detail {

class BpeEncoderCache {
 public:
  BpeEncoderCache(const BpeModel& model) : model_(model), ids_(model.symbol_ids()) {}

  // Global L1 ids (specials offset applied; unknown symbols -> [UNK]).
  std::vector<int> encode(const std::string& text) {
    std::vector<int> out;
    for (const std::string& w : split_ws(text)) {
      auto it = cache_.find(w);
      if (it == cache_.end()) {
        std::vector<int> ids;
        for (const std::string& s : apply_bpe(model_, w)) {
          auto sit = ids_.find(s);
          ids.push_back(sit == ids_.end() ? kUnk : kNumSpecials + sit->second);
        }
        it = cache_.emplace(w, std::move(ids)).first;
      }
      out.insert(out.end(), it->second.begin(), it->second.end());
    }
    return out;
  }

 private:
  const BpeModel& model_;
  std::map<std::string, int> ids_;
  std::unordered_map<std::string, std::vector<int>> cache_;
};

}  // namespace detail

// Builds the bilingual corpus: L1 is BPE-encoded text, L2 is the same
// sentence (optionally reordered) with every non-special id shifted by V.
// Precondition: every sentence is projective; non-projective sentences are
// excluded upstream.
inline PairedCorpus build_paired_corpus(const std::vector<DepSentence>& sentences,
                                        const BpeModel& bpe, CorpusMode mode,
                                        const OrderModel* order, uint64_t seed,
                                        const std::string& language_tag) {
  if (mode == CorpusMode::kReorder && (order == nullptr || order->empty()))
    throw std::invalid_argument("build_paired_corpus: reorder mode requires an order model");
  PairedCorpus pc;
  pc.vocab_per_lang = bpe.vocab_size();
  pc.language_tag = language_tag;
  pc.mode = mode == CorpusMode::kCopy ? "copy" : "reorder";
  pc.seed = seed;
  detail::BpeEncoderCache enc(bpe);
  const int shift = pc.vocab_per_lang;
  for (size_t i = 0; i < sentences.size(); ++i) {
    std::vector<int> ids1 = enc.encode(sentences[i].text());
    std::vector<int> ids2;
    if (mode == CorpusMode::kCopy) {
      ids2 = ids1;
    } else {
      // per-sentence stream keyed by index so reordering parallelizes
      Rng rng(Rng::derive(seed, i));
      ids2 = enc.encode(reorder_sentence(sentences[i], *order, rng).text());
    }
    for (int& id : ids2)
      if (!is_special_id(id)) id += shift;
    pc.l1.push_back(std::move(ids1));
    pc.l2.push_back(std::move(ids2));
  }
  return pc;
}

// --------------------------------------------------------------------------
// On-disk form: line-aligned id files plus a small JSON-ish manifest that
// the experiment runner extends. One line per sentence, space-separated
// global ids.
// --------------------------------------------------------------------------

inline void write_id_file(const std::string& path, const std::vector<std::vector<int>>& seqs) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_id_file: cannot open " + path);
  for (const auto& seq : seqs) {
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i) os << ' ';
      os << seq[i];
    }
    os << '\n';
  }
}

inline std::vector<std::vector<int>> read_id_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_id_file: cannot open " + path);
  std::vector<std::vector<int>> seqs;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<int> seq;
    std::istringstream ls(line);
    int v;
    while (ls >> v) seq.push_back(v);
    seqs.push_back(std::move(seq));
  }
  return seqs;
}

}  // namespace poslab
