#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "poslab/corpus.hpp"
#include "poslab/encoder.hpp"
#include "poslab/trainer.hpp"

namespace poslab {

struct EvalSettings {
  int layer_lo = 0;
  int layer_hi = 8;
  uint64_t ppl_seed = 9001;

  std::vector<int> layers() const { return {layer_lo, layer_hi}; }
};

struct EvalReport {
  double ppl_full = 0.0, ppl_l1 = 0.0;
  std::map<int, double> retrieval;    // layer -> accuracy %
  std::map<int, double> translation;  // layer -> accuracy %
  double ml_score = 0.0;

  // metadata
  std::string model_id, language_tag;
  uint64_t seed = 0;
  int duplicate_sentences = 0;
  int excluded_types = 0;
  std::string notes;
};

// Mean of the four accuracies (retrieval and translation at both layers).
inline double ml_score(double retr_lo, double retr_hi, double trans_lo, double trans_hi) {
  return (retr_lo + retr_hi + trans_lo + trans_hi) / 4.0;
}

namespace detail {

inline double cosine(const double* a, const double* b, int d) {
  double ab = 0, aa = 0, bb = 0;
  for (int i = 0; i < d; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return -std::numeric_limits<double>::infinity();
  return ab / std::sqrt(aa * bb);
}

// Directional top-1 retrieval: for each query row, the nearest candidate
// row by cosine must be the row with the same index. Ties break toward the
// lowest index.
inline double top1_match_rate(const Matrix& queries, const Matrix& candidates) {
  int hits = 0;
  for (int i = 0; i < queries.rows; ++i) {
    int best = -1;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < candidates.rows; ++j) {
      double sim = cosine(&queries.data[static_cast<size_t>(i) * queries.cols],
                          &candidates.data[static_cast<size_t>(j) * candidates.cols],
                          queries.cols);
      if (sim > best_sim) {
        best_sim = sim;
        best = j;
      }
    }
    hits += best == i;
  }
  return static_cast<double>(hits) / queries.rows;
}

}  // namespace detail

// Mean of the hidden states at one layer over non-special, non-pad tokens.
inline Matrix sentence_repr(EncoderModel& model, const std::vector<int>& ids, int layer) {
  if (layer < 0 || layer > model.config.layers)
    throw std::out_of_range("sentence_repr: layer out of range");
  ForwardResult fr = forward(model, ids);
  const Matrix& states = fr.states[layer];
  Matrix mean(1, states.cols);
  int n = 0;
  for (int i = 0; i < states.rows; ++i) {
    if (is_special_id(ids[i])) continue;
    for (int j = 0; j < states.cols; ++j) mean.at(0, j) += states.at(i, j);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("sentence_repr: sentence has no content tokens");
  for (double& v : mean.data) v /= n;
  return mean;
}

// Per-layer representations harvested in one pass over the corpus:
// sentence means for retrieval, occurrence-weighted type means for
// translation.
struct LayerReps {
  Matrix l1_sent, l2_sent;      // pair_count x d
  Matrix type_sum;              // vocab x d
  std::vector<long> type_count; // vocab
};

inline std::map<int, LayerReps> collect_reps(EncoderModel& model, const PairedCorpus& corpus,
                                             const std::vector<int>& layers) {
  if (corpus.pair_count() == 0) throw std::invalid_argument("collect_reps: empty corpus");
  const int d = model.config.d_model;
  const int n = corpus.pair_count();
  std::map<int, LayerReps> reps;
  for (int layer : layers) {
    if (layer < 0 || layer > model.config.layers)
      throw std::out_of_range("collect_reps: layer " + std::to_string(layer) +
                              " out of range for a " + std::to_string(model.config.layers) +
                              "-layer model");
    LayerReps lr;
    lr.l1_sent = Matrix(n, d);
    lr.l2_sent = Matrix(n, d);
    lr.type_sum = Matrix(model.config.vocab_size, d);
    lr.type_count.assign(model.config.vocab_size, 0);
    reps.emplace(layer, std::move(lr));
  }

  auto process_half = [&](const std::vector<std::vector<int>>& half, bool is_l1) {
    // leaves are re-recorded in chunks to bound tape growth
    const int chunk = 32;
    for (int base = 0; base < n; base += chunk) {
      Tape tape;
      ModelVars vars = record_model(tape, model);
      for (int s = base; s < n && s < base + chunk; ++s) {
        std::vector<int> seq = compose_sequence(half[s], model.config.max_seq_len);
        std::vector<Tape::VarId> states =
            encode_states_on_tape(tape, model.config, vars, seq);
        for (int layer : layers) {
          const Matrix& h = tape.val(states[layer]);
          LayerReps& lr = reps.at(layer);
          Matrix& sent = is_l1 ? lr.l1_sent : lr.l2_sent;
          int content = 0;
          for (int i = 0; i < h.rows; ++i) {
            if (is_special_id(seq[i])) continue;
            ++content;
            for (int j = 0; j < d; ++j) sent.at(s, j) += h.at(i, j);
            lr.type_count[seq[i]]++;
            for (int j = 0; j < d; ++j) lr.type_sum.at(seq[i], j) += h.at(i, j);
          }
          if (content > 0)
            for (int j = 0; j < d; ++j) sent.at(s, j) /= content;
        }
      }
    }
  };
  process_half(corpus.l1, true);
  process_half(corpus.l2, false);
  return reps;
}

// Both-direction sentence retrieval accuracy (%) from precomputed reps.
inline double retrieval_accuracy_from_reps(const LayerReps& lr) {
  if (lr.l1_sent.rows < 2)
    throw std::invalid_argument("retrieval_accuracy: need at least 2 pairs");
  double fwd = detail::top1_match_rate(lr.l1_sent, lr.l2_sent);
  double bwd = detail::top1_match_rate(lr.l2_sent, lr.l1_sent);
  return 100.0 * 0.5 * (fwd + bwd);
}

inline double retrieval_accuracy(EncoderModel& model, const PairedCorpus& corpus, int layer) {
  auto reps = collect_reps(model, corpus, {layer});
  return retrieval_accuracy_from_reps(reps.at(layer));
}

// Type-level word translation accuracy (%): a subword type is evaluated if
// it and its gold-shifted counterpart both occur in the corpus; nearest
// neighbor by cosine must land on the counterpart. Both directions
// averaged.
inline double translation_accuracy_from_reps(const LayerReps& lr, int vocab_per_lang,
                                             int* excluded_types = nullptr) {
  const int v0 = kNumSpecials;
  const int d = lr.type_sum.cols;
  std::vector<int> eval_types;
  int excluded = 0;
  for (int v = v0; v < v0 + vocab_per_lang; ++v) {
    if (lr.type_count[v] > 0 && lr.type_count[v + vocab_per_lang] > 0)
      eval_types.push_back(v);
    else if (lr.type_count[v] > 0 || lr.type_count[v + vocab_per_lang] > 0)
      ++excluded;
  }
  if (excluded_types) *excluded_types = excluded;
  if (eval_types.empty())
    throw std::invalid_argument("translation_accuracy: no shared subword types");

  const int t = static_cast<int>(eval_types.size());
  Matrix l1(t, d), l2(t, d);
  for (int i = 0; i < t; ++i) {
    int v = eval_types[i];
    for (int j = 0; j < d; ++j) {
      l1.at(i, j) = lr.type_sum.at(v, j) / lr.type_count[v];
      l2.at(i, j) = lr.type_sum.at(v + vocab_per_lang, j) / lr.type_count[v + vocab_per_lang];
    }
  }
  double fwd = detail::top1_match_rate(l1, l2);
  double bwd = detail::top1_match_rate(l2, l1);
  return 100.0 * 0.5 * (fwd + bwd);
}

inline double translation_accuracy(EncoderModel& model, const PairedCorpus& corpus,
                                   int layer) {
  auto reps = collect_reps(model, corpus, {layer});
  return translation_accuracy_from_reps(reps.at(layer), corpus.vocab_per_lang);
}

// Full evaluation of one model on a validation corpus.
inline EvalReport evaluate(EncoderModel& model, const PairedCorpus& corpus,
                           const EvalSettings& settings, const TrainConfig& train_cfg = {}) {
  EvalReport r;
  r.language_tag = corpus.language_tag;
  r.ppl_full = pseudo_perplexity(model, corpus, PplHalf::kFull, settings.ppl_seed, train_cfg);
  r.ppl_l1 = pseudo_perplexity(model, corpus, PplHalf::kL1, settings.ppl_seed, train_cfg);

  auto reps = collect_reps(model, corpus, settings.layers());
  int excluded = 0;
  for (int layer : settings.layers()) {
    r.retrieval[layer] = retrieval_accuracy_from_reps(reps.at(layer));
    r.translation[layer] =
        translation_accuracy_from_reps(reps.at(layer), corpus.vocab_per_lang, &excluded);
  }
  r.excluded_types = excluded;
  r.ml_score = ml_score(r.retrieval[settings.layer_lo], r.retrieval[settings.layer_hi],
                        r.translation[settings.layer_lo], r.translation[settings.layer_hi]);

  std::set<std::vector<int>> uniq(corpus.l1.begin(), corpus.l1.end());
  r.duplicate_sentences = corpus.pair_count() - static_cast<int>(uniq.size());
  r.notes =
      "layer0=embedding stage (token-only for untied/relative kinds); "
      "pooling=mean over non-special tokens; accuracies averaged over both "
      "directions; ties break toward lowest index";
  return r;
}

}  // namespace poslab
