#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "poslab/conllu.hpp"
#include "poslab/rng.hpp"

namespace poslab {

// Synthetic English-like sentence generator. Emits dependency trees that
// are projective by construction, so the whole pipeline (BPE, reordering,
// training) can run on deterministic desk-scale corpora with no external
// data. Word-order knobs let the same grammar double as a structurally
// different "superstrate" treebank for reorder experiments.
struct GrammarParams {
  // constituent probabilities
  double p_det = 0.85;
  double p_adj = 0.42;
  double p_second_adj = 0.16;
  double p_np_pp = 0.16;
  double p_obl = 0.38;
  double p_advmod = 0.38;
  double p_trans = 0.62;
  double p_pron_subj = 0.12;
  double p_conj = 0.22;
  int max_conj = 1;  // geometric clause chaining up to this many extra clauses
  int max_np_depth = 2;

  // word-order knobs (probability that the dependant precedes its head)
  double p_det_before_noun = 1.0;
  double p_adj_before_noun = 1.0;
  double p_nmod_before_noun = 0.0;
  double p_adp_before_np = 1.0;  // adposition precedes its NP (preposition)
  double p_subj_before_verb = 1.0;
  double p_obj_before_verb = 0.0;
  double p_obl_before_verb = 0.0;
  double p_advmod_before_verb = 0.45;

  static GrammarParams english() { return GrammarParams(); }

  // English with a heavy tail of multi-clause sentences, so higher
  // positions still receive training signal at desk scale.
  static GrammarParams english_mixed() {
    GrammarParams g;
    g.p_conj = 0.45;
    g.max_conj = 4;
    g.p_obl = 0.45;
    g.p_advmod = 0.42;
    g.p_np_pp = 0.22;
    return g;
  }

  // Verb-final, postpositional, adjective-after-noun flavor; structurally
  // far from English the way the paper's reordered faux-languages are.
  static GrammarParams sov() {
    GrammarParams g;
    g.p_adj_before_noun = 0.1;
    g.p_nmod_before_noun = 0.9;
    g.p_adp_before_np = 0.05;
    g.p_obj_before_verb = 0.95;
    g.p_obl_before_verb = 0.9;
    g.p_advmod_before_verb = 0.85;
    return g;
  }
};

namespace textgen_detail {

inline const std::vector<std::string>& nouns() {
  static const std::vector<std::string> v = {
      "dog",      "cat",     "tree",    "house",   "river",   "child",   "king",
      "garden",   "book",    "stone",   "bird",    "wolf",    "road",    "mountain",
      "ship",     "door",    "friend",  "letter",  "song",    "story",   "field",
      "forest",   "horse",   "market",  "teacher", "doctor",  "farmer",  "soldier",
      "city",     "village", "window",  "bridge",  "lamp",    "table",   "winter",
      "morning",  "evening", "queen",   "island",  "valley",  "castle",  "student",
      "painter",  "sailor",  "hunter",  "baker",   "garden",  "wall",    "tower",
      "shadow",   "flower",  "cloud",   "fire",    "well",    "path",    "harbor",
      "orchard",  "meadow",  "mill",    "barn",    "fox",     "rabbit",  "eagle",
      "fisherman", "merchant", "priest"};
  return v;
}
inline const std::vector<std::string>& verbs_trans() {
  static const std::vector<std::string> v = {
      "sees",    "finds",   "follows", "carries", "builds",  "breaks", "brings",
      "keeps",   "loves",   "paints",  "reads",   "writes",  "watches", "holds",
      "opens",   "closes",  "guards",  "crosses", "visits",  "remembers", "fears",
      "greets",  "teaches", "helps",   "hides",   "seeks",   "burns",  "lifts"};
  return v;
}
inline const std::vector<std::string>& verbs_intrans() {
  static const std::vector<std::string> v = {
      "sleeps", "runs",   "falls",  "laughs", "waits",  "sings", "dreams",
      "walks",  "swims",  "rises",  "rests",  "shines", "fades", "trembles",
      "wanders", "listens"};
  return v;
}
inline const std::vector<std::string>& adjectives() {
  static const std::vector<std::string> v = {
      "old",    "young",  "small",  "large",  "quiet", "bright",  "dark",
      "green",  "heavy",  "light",  "strange", "gentle", "proud",  "tired",
      "happy",  "golden", "broken", "distant", "narrow", "wide",   "cold",
      "warm",   "silent", "hidden", "ancient", "lonely", "simple", "wild"};
  return v;
}
inline const std::vector<std::string>& determiners() {
  static const std::vector<std::string> v = {"the", "a", "this", "that", "every", "some"};
  return v;
}
inline const std::vector<std::string>& adpositions() {
  static const std::vector<std::string> v = {"in",     "on",     "under", "near",
                                             "behind", "beside", "above", "across",
                                             "through"};
  return v;
}
inline const std::vector<std::string>& adverbs() {
  static const std::vector<std::string> v = {"slowly", "quickly", "quietly", "often",
                                             "always", "never",   "again",   "soon",
                                             "gladly", "alone"};
  return v;
}
inline const std::vector<std::string>& pronouns() {
  static const std::vector<std::string> v = {"he", "she", "they", "we", "it", "someone"};
  return v;
}

// mild Zipf over a word list
inline int zipf_pick(Rng& rng, size_t n) {
  static thread_local std::vector<double> weights;
  weights.resize(n);
  for (size_t i = 0; i < n; ++i) weights[i] = 1.0 / std::pow(static_cast<double>(i) + 1.5, 0.85);
  return rng.categorical(weights);
}
inline const std::string& pick(Rng& rng, const std::vector<std::string>& words) {
  return words[zipf_pick(rng, words.size())];
}

struct TokenRec {
  std::string form, upos, deprel;
  int parent;  // index into the builder's token list, -1 for root
};

class SentenceBuilder {
 public:
  SentenceBuilder(Rng& rng, const GrammarParams& g) : rng_(rng), g_(g) {}

  DepSentence build() {
    int root = clause(-1, "root");
    for (int extra = 0; extra < g_.max_conj && rng_.bernoulli(g_.p_conj); ++extra) {
      size_t mark = order_.size();  // next conjunct starts here
      int v2 = clause(root, "conj");
      int cc = add("and", "CCONJ", "cc", v2);
      order_.insert(order_.begin() + static_cast<long>(mark), cc);
    }
    int punct = add(".", "PUNCT", "punct", root);
    order_.push_back(punct);
    return materialize();
  }

 private:
  Rng& rng_;
  const GrammarParams& g_;
  std::vector<TokenRec> toks_;
  std::vector<int> order_;  // token indices in surface order

  int add(const std::string& form, const std::string& upos, const std::string& deprel,
          int parent) {
    toks_.push_back({form, upos, deprel, parent});
    return static_cast<int>(toks_.size()) - 1;
  }

  // Builds an NP, appends it to order_ as a contiguous block, returns the
  // head noun's token index.
  int noun_phrase(int parent, const std::string& deprel, int depth) {
    std::vector<int> before, after;
    int head = add(pick(rng_, nouns()), "NOUN", deprel, parent);
    if (rng_.bernoulli(g_.p_det)) {
      int det = add(pick(rng_, determiners()), "DET", "det", head);
      (rng_.bernoulli(g_.p_det_before_noun) ? before : after).push_back(det);
    }
    if (rng_.bernoulli(g_.p_adj)) {
      int adj = add(pick(rng_, adjectives()), "ADJ", "amod", head);
      (rng_.bernoulli(g_.p_adj_before_noun) ? before : after).push_back(adj);
      if (rng_.bernoulli(g_.p_second_adj)) {
        int adj2 = add(pick(rng_, adjectives()), "ADJ", "amod", head);
        (rng_.bernoulli(g_.p_adj_before_noun) ? before : after).push_back(adj2);
      }
    }
    for (int b : before) order_.push_back(b);
    order_.push_back(head);
    for (int a : after) order_.push_back(a);
    if (depth < g_.max_np_depth && rng_.bernoulli(g_.p_np_pp)) {
      bool pre = rng_.bernoulli(g_.p_nmod_before_noun);
      if (pre) {
        // carve out space before the block we just wrote: rebuild order
        std::vector<int> block(order_.end() - (1 + before.size() + after.size()), order_.end());
        order_.resize(order_.size() - block.size());
        adp_phrase(head, "nmod", depth + 1);
        order_.insert(order_.end(), block.begin(), block.end());
      } else {
        adp_phrase(head, "nmod", depth + 1);
      }
    }
    return head;
  }

  // ADP + NP (or NP + ADP for postpositional grammars); the NP head is the
  // phrase head, the adposition attaches to it as `case`.
  int adp_phrase(int parent, const std::string& deprel, int depth) {
    bool pre = rng_.bernoulli(g_.p_adp_before_np);
    int adp = -1;
    if (pre) {
      adp = add(pick(rng_, adpositions()), "ADP", "case", -2);
      order_.push_back(adp);
    }
    int np = noun_phrase(parent, deprel, depth);
    if (!pre) {
      adp = add(pick(rng_, adpositions()), "ADP", "case", np);
      order_.push_back(adp);
    } else {
      toks_[adp].parent = np;
    }
    return np;
  }

  // Builds a clause around a verb, appends it in surface order, returns
  // the verb token index.
  int clause(int parent, const std::string& deprel) {
    bool trans = rng_.bernoulli(g_.p_trans);
    int verb = add(pick(rng_, trans ? verbs_trans() : verbs_intrans()), "VERB", deprel, parent);

    struct Dep {
      enum Kind { kSubj, kObj, kObl, kAdv } kind;
      bool before;
    };
    std::vector<Dep> deps;
    deps.push_back({Dep::kSubj, rng_.bernoulli(g_.p_subj_before_verb)});
    if (trans) deps.push_back({Dep::kObj, rng_.bernoulli(g_.p_obj_before_verb)});
    if (rng_.bernoulli(g_.p_obl)) deps.push_back({Dep::kObl, rng_.bernoulli(g_.p_obl_before_verb)});
    if (rng_.bernoulli(g_.p_advmod))
      deps.push_back({Dep::kAdv, rng_.bernoulli(g_.p_advmod_before_verb)});

    auto emit = [&](const Dep& d) {
      switch (d.kind) {
        case Dep::kSubj:
          if (rng_.bernoulli(g_.p_pron_subj))
            order_.push_back(add(pick(rng_, pronouns()), "PRON", "nsubj", verb));
          else
            noun_phrase(verb, "nsubj", 0);
          break;
        case Dep::kObj:
          noun_phrase(verb, "obj", 0);
          break;
        case Dep::kObl:
          adp_phrase(verb, "obl", 0);
          break;
        case Dep::kAdv:
          order_.push_back(add(pick(rng_, adverbs()), "ADV", "advmod", verb));
          break;
      }
    };

    for (const Dep& d : deps)
      if (d.before) emit(d);
    order_.push_back(verb);
    for (const Dep& d : deps)
      if (!d.before) emit(d);
    return verb;
  }

  DepSentence materialize() {
    DepSentence s;
    std::vector<int> pos(toks_.size(), 0);  // token index -> 1-based position
    for (size_t i = 0; i < order_.size(); ++i) pos[order_[i]] = static_cast<int>(i) + 1;
    for (int tok : order_) {
      const TokenRec& t = toks_[tok];
      s.tokens.push_back(t.form);
      s.upos.push_back(t.upos);
      s.deprels.push_back(t.deprel);
      s.heads.push_back(t.parent < 0 ? 0 : pos[t.parent]);
    }
    return s;
  }
};

}  // namespace textgen_detail

inline DepSentence gen_sentence(Rng& rng, const GrammarParams& params) {
  return textgen_detail::SentenceBuilder(rng, params).build();
}

// Deterministic treebank of n distinct sentences (deduplicated on surface
// form).
inline std::vector<DepSentence> gen_treebank(int n, uint64_t seed,
                                             const GrammarParams& params) {
  Rng rng(Rng::derive(seed, 0x747874ULL));
  std::vector<DepSentence> out;
  std::set<std::string> seen;
  int attempts = 0;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > 200 * n + 10000)
      throw std::runtime_error("gen_treebank: cannot generate enough distinct sentences");
    DepSentence s = gen_sentence(rng, params);
    if (seen.insert(s.text()).second) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace poslab
