#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "poslab/corpus.hpp"
#include "poslab/encoder.hpp"
#include "poslab/rng.hpp"
#include "poslab/tape.hpp"

namespace poslab {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 64;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double mask_ratio = 0.15;
  double mask_to_mask = 0.8, mask_to_random = 0.1;  // remainder left unchanged
  double grad_clip = 0.0;                           // 0 disables clipping
  int checkpoint_every = 10;
  uint64_t val_mask_seed = 9001;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
      throw std::invalid_argument("train: mask_ratio must be in (0,1)");
    if (mask_to_mask < 0 || mask_to_random < 0 || mask_to_mask + mask_to_random > 1.0)
      throw std::invalid_argument("train: mask split must sum to at most 1");
  }
};

// One masked training sequence: ids after corruption, plus per-position
// labels holding the original id at selected positions and -1 elsewhere.
struct MaskedSentence {
  std::vector<int> ids;
  std::vector<int> labels;
  int masked_count() const {
    int n = 0;
    for (int l : labels) n += l >= 0;
    return n;
  }
};

namespace detail {

inline MaskedSentence mask_one(const std::vector<int>& seq, Rng& rng, const TrainConfig& cfg,
                               int vocab_size) {
  MaskedSentence out;
  out.ids = seq;
  out.labels.assign(seq.size(), -1);
  for (size_t i = 0; i < seq.size(); ++i) {
    if (is_special_id(seq[i])) continue;  // specials are never selected
    if (!rng.bernoulli(cfg.mask_ratio)) continue;
    out.labels[i] = seq[i];
    double r = rng.uniform();
    if (r < cfg.mask_to_mask) {
      out.ids[i] = kMask;
    } else if (r < cfg.mask_to_mask + cfg.mask_to_random) {
      out.ids[i] = rng.uniform_int(kNumSpecials, vocab_size - 1);
    }  // else: keep the original token
  }
  return out;
}

}  // namespace detail

// BERT-style dynamic masking of a batch: ~mask_ratio of non-special tokens
// are selected; of those 80% become [MASK], 10% a random non-special id,
// 10% stay unchanged. A batch with zero selected tokens is re-rolled once.
inline std::vector<MaskedSentence> mask_batch(const std::vector<std::vector<int>>& batch,
                                              Rng& rng, const TrainConfig& cfg,
                                              int vocab_size) {
  cfg.validate();
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::vector<MaskedSentence> out;
    out.reserve(batch.size());
    int total = 0;
    for (const auto& seq : batch) {
      out.push_back(detail::mask_one(seq, rng, cfg, vocab_size));
      total += out.back().masked_count();
    }
    if (total > 0) return out;
  }
  throw std::runtime_error("mask_batch: no maskable tokens in batch after re-roll");
}

struct AdamState {
  long step = 0;
  std::vector<Matrix> m, v;  // aligned with EncoderModel::visit_params order
};

inline void adam_init(AdamState& st, EncoderModel& model) {
  st.step = 0;
  st.m.clear();
  st.v.clear();
  model.visit_params([&](const std::string&, Matrix& p) {
    st.m.emplace_back(p.rows, p.cols);
    st.v.emplace_back(p.rows, p.cols);
  });
}

inline void adam_step(EncoderModel& model, const std::vector<Matrix>& grads, AdamState& st,
                      const TrainConfig& cfg) {
  st.step++;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  double clip_scale = 1.0;
  if (cfg.grad_clip > 0.0) {
    double norm_sq = 0.0;
    for (const Matrix& g : grads) norm_sq += frobenius_sq(g);
    double norm = std::sqrt(norm_sq);
    if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
  }
  size_t k = 0;
  model.visit_params([&](const std::string&, Matrix& p) {
    const Matrix& g = grads[k];
    Matrix& m = st.m[k];
    Matrix& v = st.v[k];
    for (size_t i = 0; i < p.data.size(); ++i) {
      double gi = g.data[i] * clip_scale;
      m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
      v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      p.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
    ++k;
  });
}

// [CLS] ... [SEP], truncated to the model's max sequence length.
inline std::vector<int> compose_sequence(const std::vector<int>& raw, int max_seq_len) {
  std::vector<int> seq;
  seq.reserve(raw.size() + 2);
  seq.push_back(kCls);
  int budget = max_seq_len - 2;
  for (int i = 0; i < static_cast<int>(raw.size()) && i < budget; ++i) seq.push_back(raw[i]);
  seq.push_back(kSep);
  return seq;
}

// Both corpus halves as independent training sentences.
inline std::vector<std::vector<int>> training_sequences(const PairedCorpus& corpus,
                                                        int max_seq_len,
                                                        bool l1_only = false) {
  std::vector<std::vector<int>> seqs;
  seqs.reserve(corpus.l1.size() * (l1_only ? 1 : 2));
  for (const auto& s : corpus.l1) seqs.push_back(compose_sequence(s, max_seq_len));
  if (!l1_only)
    for (const auto& s : corpus.l2) seqs.push_back(compose_sequence(s, max_seq_len));
  return seqs;
}

// One optimizer step over a masked batch; returns the batch loss (mean
// cross-entropy over its masked positions).
inline double train_step(EncoderModel& model, const std::vector<MaskedSentence>& batch,
                         AdamState& adam, const TrainConfig& cfg, Rng& dropout_rng) {
  Tape tape;
  ModelVars vars = record_model(tape, model);
  ForwardOpts opts;
  opts.train = true;
  opts.dropout_rng = &dropout_rng;

  std::vector<Tape::VarId> masked_rows;
  std::vector<int> labels;
  for (const MaskedSentence& ms : batch) {
    if (ms.masked_count() == 0) continue;
    std::vector<Tape::VarId> states =
        encode_states_on_tape(tape, model.config, vars, ms.ids, opts);
    std::vector<int> positions;
    for (size_t i = 0; i < ms.labels.size(); ++i)
      if (ms.labels[i] >= 0) {
        positions.push_back(static_cast<int>(i));
        labels.push_back(ms.labels[i]);
      }
    masked_rows.push_back(tape.gather_rows(states.back(), positions));
  }
  if (masked_rows.empty()) throw std::runtime_error("train_step: empty batch");

  Tape::VarId hidden = masked_rows.size() == 1 ? masked_rows[0] : tape.concat_rows(masked_rows);
  Tape::VarId logits = tape.add_rowvec(tape.matmul_nt(hidden, vars.tok_embed), vars.out_bias);
  Tape::VarId loss = tape.cross_entropy_mean(logits, labels);
  double loss_value = tape.val(loss).data[0];

  tape.backward(loss);
  std::vector<Matrix> grads;
  grads.reserve(vars.leaves.size());
  for (Tape::VarId leaf : vars.leaves) grads.push_back(tape.grad(leaf));
  adam_step(model, grads, adam, cfg);
  return loss_value;
}

enum class PplHalf { kFull, kL1 };

namespace detail {

struct PplAccum {
  double ce_sum = 0.0;
  long count = 0;
  double ppl() const {
    if (count == 0) throw std::runtime_error("pseudo_perplexity: empty selection");
    return std::exp(ce_sum / count);
  }
};

// One fixed seeded masking pass. Per-sentence streams are derived from the
// sentence index so the masks do not depend on batch composition, which
// keeps perplexities paired across models.
inline void ppl_pass(EncoderModel& model, const std::vector<std::vector<int>>& raw,
                     size_t index_base, uint64_t seed, const TrainConfig& cfg,
                     PplAccum& acc) {
  for (size_t i = 0; i < raw.size(); ++i) {
    std::vector<int> seq = compose_sequence(raw[i], model.config.max_seq_len);
    Rng rng(Rng::derive(seed, index_base + i));
    MaskedSentence ms = detail::mask_one(seq, rng, cfg, model.config.vocab_size);
    if (ms.masked_count() == 0) {
      ms = detail::mask_one(seq, rng, cfg, model.config.vocab_size);
      if (ms.masked_count() == 0) continue;
    }
    ForwardResult fr = forward(model, ms.ids);
    double ce = mlm_loss(fr.mlm_logits, ms.labels);
    acc.ce_sum += ce * ms.masked_count();
    acc.count += ms.masked_count();
  }
}

}  // namespace detail

// exp(mean masked-token cross-entropy) over one seeded masking pass of the
// selected corpus half. A comparison proxy, not a true perplexity.
inline double pseudo_perplexity(EncoderModel& model, const PairedCorpus& corpus,
                                PplHalf half, uint64_t seed,
                                const TrainConfig& cfg = TrainConfig{}) {
  detail::PplAccum acc;
  detail::ppl_pass(model, corpus.l1, 0, seed, cfg, acc);
  if (half == PplHalf::kFull)
    detail::ppl_pass(model, corpus.l2, corpus.l1.size(), seed, cfg, acc);
  return acc.ppl();
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_ppl_full = 0.0;
  double val_ppl_l1 = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHooks {
  int start_epoch = 0;            // resume point (epochs already completed)
  AdamState* resume_state = nullptr;
  bool l1_only = false;           // monolingual control: train on L1 half only
  std::function<void(int epochs_done, EncoderModel&, const AdamState&,
                     const std::vector<EpochLog>&)>
      on_checkpoint;
};

// MLM training loop. Deterministic given (config, seed): every epoch
// derives its shuffle, masking, and dropout streams from (seed, epoch), so
// resuming from an epoch boundary replays the identical tail.
inline std::vector<EpochLog> train(EncoderModel& model, const PairedCorpus& train_corpus,
                                   const PairedCorpus* valid_corpus, const TrainConfig& cfg,
                                   uint64_t seed, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_corpus.pair_count() == 0) throw std::invalid_argument("train: empty corpus");
  std::vector<std::vector<int>> seqs =
      training_sequences(train_corpus, model.config.max_seq_len, hooks.l1_only);

  AdamState local_state;
  AdamState& adam = hooks.resume_state ? *hooks.resume_state : local_state;
  if (!hooks.resume_state || adam.m.empty()) adam_init(adam, model);

  std::vector<EpochLog> log;
  for (int epoch = hooks.start_epoch; epoch < cfg.epochs; ++epoch) {
    auto clock_start = std::chrono::steady_clock::now();
    Rng shuffle_rng(Rng::derive(seed, 1000003ULL + epoch));
    Rng mask_rng(Rng::derive(seed, 2000003ULL + epoch));
    Rng dropout_rng(Rng::derive(seed, 3000003ULL + epoch));

    std::vector<int> order = shuffle_rng.permutation(static_cast<int>(seqs.size()));
    double loss_sum = 0.0;
    int steps = 0;
    for (size_t at = 0; at < order.size(); at += cfg.batch_size) {
      std::vector<std::vector<int>> batch;
      for (size_t i = at; i < order.size() && i < at + cfg.batch_size; ++i)
        batch.push_back(seqs[order[i]]);
      std::vector<MaskedSentence> masked =
          mask_batch(batch, mask_rng, cfg, model.config.vocab_size);
      double loss;
      try {
        loss = train_step(model, masked, adam, cfg, dropout_rng);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " at epoch " +
                                 std::to_string(epoch));
      }
      if (!std::isfinite(loss))
        throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch));
      loss_sum += loss;
      ++steps;
    }

    EpochLog el;
    el.epoch = epoch;
    el.train_loss = steps ? loss_sum / steps : 0.0;
    if (valid_corpus) {
      el.val_ppl_full = pseudo_perplexity(model, *valid_corpus, PplHalf::kFull,
                                          cfg.val_mask_seed, cfg);
      el.val_ppl_l1 = pseudo_perplexity(model, *valid_corpus, PplHalf::kL1,
                                        cfg.val_mask_seed, cfg);
    }
    el.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    log.push_back(el);

    bool checkpoint_due = cfg.checkpoint_every > 0 &&
                          ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs);
    if (hooks.on_checkpoint && checkpoint_due)
      hooks.on_checkpoint(epoch + 1, model, adam, log);
  }
  return log;
}

}  // namespace poslab
