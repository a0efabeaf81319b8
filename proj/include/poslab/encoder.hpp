#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "poslab/matrix.hpp"
#include "poslab/posenc.hpp"
#include "poslab/rng.hpp"
#include "poslab/tape.hpp"

namespace poslab {

// Special token ids, shared across both halves of a paired corpus.
enum SpecialToken : int { kPad = 0, kUnk = 1, kCls = 2, kSep = 3, kMask = 4 };
constexpr int kNumSpecials = 5;

inline bool is_special_id(int id) { return id >= 0 && id < kNumSpecials; }

// Layer-1 attention-term ablations. Only meaningful for the absolute kind,
// where the fused product ((w+p)W^Q)((w+p)W^K)^T expands into the four
// word/position cross terms.
struct AblationFlags {
  bool drop_position_position = false;
  bool drop_position_word = false;  // (p_i W^Q)(w_j W^K)^T, position as query
  bool drop_word_position = false;  // (w_i W^Q)(p_j W^K)^T, position as key
  bool untie_word_position_params = false;

  bool any() const {
    return drop_position_position || drop_position_word || drop_word_position ||
           untie_word_position_params;
  }
  std::string tag() const {
    if (!any()) return "none";
    std::string s;
    auto app = [&](const char* t) {
      if (!s.empty()) s += "+";
      s += t;
    };
    if (drop_position_position) app("drop_pp");
    if (drop_position_word) app("drop_pw");
    if (drop_word_position) app("drop_wp");
    if (untie_word_position_params) app("untie_params");
    return s;
  }
  static AblationFlags from_tag(const std::string& tag);
};

inline AblationFlags AblationFlags::from_tag(const std::string& tag) {
  AblationFlags f;
  if (tag.empty() || tag == "none") return f;
  size_t at = 0;
  while (at < tag.size()) {
    size_t plus = tag.find('+', at);
    if (plus == std::string::npos) plus = tag.size();
    std::string part = tag.substr(at, plus - at);
    if (part == "drop_pp") f.drop_position_position = true;
    else if (part == "drop_pw") f.drop_position_word = true;
    else if (part == "drop_wp") f.drop_word_position = true;
    else if (part == "untie_params") f.untie_word_position_params = true;
    else throw std::invalid_argument("unknown ablation tag: " + part);
    at = plus + 1;
  }
  return f;
}

struct EncoderConfig {
  int layers = 12;
  int heads = 1;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 0;  // specials + 2V
  int max_seq_len = 128;
  double dropout = 0.1;
  double ln_eps = 1e-12;
  PosEncSpec posenc;
  AblationFlags ablation;

  int d_head() const { return d_model / heads; }

  void validate() const {
    if (layers < 1) throw std::invalid_argument("encoder: layers must be >= 1");
    if (heads < 1 || d_model % heads != 0)
      throw std::invalid_argument("encoder: heads must divide d_model");
    if (vocab_size <= kNumSpecials)
      throw std::invalid_argument("encoder: vocab_size must exceed the special inventory");
    if (posenc.d_model != d_model)
      throw std::invalid_argument("encoder: posenc.d_model must equal d_model");
    if (max_seq_len > posenc.max_positions)
      throw std::invalid_argument("encoder: max_seq_len exceeds posenc.max_positions");
    if (ablation.any() && posenc.kind != PosEncKind::kAbsolute)
      throw std::invalid_argument("encoder: ablation flags require the absolute kind");
    posenc.validate();
  }
};

// All learnable matrices of the encoder plus its positional parameters.
struct EncoderModel {
  struct Layer {
    Matrix wq, wk, wv, bv, wo, bo;
    Matrix ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Matrix ln1_g, ln1_b, ln2_g, ln2_b;
  };

  EncoderConfig config;
  Matrix tok_embed;  // vocab x d, tied with the MLM output projection
  Matrix out_bias;   // 1 x vocab
  std::vector<Layer> layers;
  PosParams pos;
  Matrix sin_table;  // fixed, sinusoidal kind only

  static EncoderModel init(const EncoderConfig& cfg, uint64_t seed) {
    cfg.validate();
    EncoderModel m;
    m.config = cfg;
    Rng rng(Rng::derive(seed, 0x6d6f64656cULL));
    auto gauss = [&](int r, int c) {
      Matrix w(r, c);
      for (double& v : w.data) v = rng.normal(0.0, 0.02);
      return w;
    };
    m.tok_embed = gauss(cfg.vocab_size, cfg.d_model);
    m.out_bias = Matrix(1, cfg.vocab_size);
    m.layers.resize(cfg.layers);
    for (auto& l : m.layers) {
      l.wq = gauss(cfg.d_model, cfg.d_model);
      l.wk = gauss(cfg.d_model, cfg.d_model);
      l.wv = gauss(cfg.d_model, cfg.d_model);
      l.bv = Matrix(1, cfg.d_model);
      l.wo = gauss(cfg.d_model, cfg.d_model);
      l.bo = Matrix(1, cfg.d_model);
      l.ffn_w1 = gauss(cfg.d_model, cfg.d_ff);
      l.ffn_b1 = Matrix(1, cfg.d_ff);
      l.ffn_w2 = gauss(cfg.d_ff, cfg.d_model);
      l.ffn_b2 = Matrix(1, cfg.d_model);
      l.ln1_g = Matrix::filled(1, cfg.d_model, 1.0);
      l.ln1_b = Matrix(1, cfg.d_model);
      l.ln2_g = Matrix::filled(1, cfg.d_model, 1.0);
      l.ln2_b = Matrix(1, cfg.d_model);
    }
    m.pos = init_pos_params(cfg.posenc, rng);
    if (cfg.posenc.kind == PosEncKind::kAbsolute && cfg.ablation.untie_word_position_params) {
      m.pos.uq = gauss(cfg.d_model, cfg.d_model);
      m.pos.uk = gauss(cfg.d_model, cfg.d_model);
    }
    if (cfg.posenc.kind == PosEncKind::kSinusoidal)
      m.sin_table = sinusoidal_table(cfg.posenc.max_positions, cfg.d_model);
    return m;
  }

  // Fixed-order traversal of every learnable parameter; the order defines
  // checkpoint entry names and the optimizer state layout.
  template <typename Fn>
  void visit_params(Fn&& fn) {
    fn("tok_embed", tok_embed);
    fn("out_bias", out_bias);
    for (size_t i = 0; i < layers.size(); ++i) {
      std::string p = "layer" + std::to_string(i) + ".";
      Layer& l = layers[i];
      fn(p + "wq", l.wq);
      fn(p + "wk", l.wk);
      fn(p + "wv", l.wv);
      fn(p + "bv", l.bv);
      fn(p + "wo", l.wo);
      fn(p + "bo", l.bo);
      fn(p + "ffn_w1", l.ffn_w1);
      fn(p + "ffn_b1", l.ffn_b1);
      fn(p + "ffn_w2", l.ffn_w2);
      fn(p + "ffn_b2", l.ffn_b2);
      fn(p + "ln1_g", l.ln1_g);
      fn(p + "ln1_b", l.ln1_b);
      fn(p + "ln2_g", l.ln2_g);
      fn(p + "ln2_b", l.ln2_b);
    }
    if (pos.table.size() > 0) fn("pos.table", pos.table);
    if (pos.uq.size() > 0) fn("pos.uq", pos.uq);
    if (pos.uk.size() > 0) fn("pos.uk", pos.uk);
    if (pos.bucket_bias.size() > 0) fn("pos.bucket_bias", pos.bucket_bias);
    if (pos.theta1.size() > 0) fn("pos.theta1", pos.theta1);
    if (pos.theta2.size() > 0) fn("pos.theta2", pos.theta2);
  }

  long param_count() {
    long n = 0;
    visit_params([&](const std::string&, Matrix& m) { n += static_cast<long>(m.size()); });
    return n;
  }
  long positional_param_count() {
    long n = 0;
    visit_params([&](const std::string& name, Matrix& m) {
      if (name.rfind("pos.", 0) == 0) n += static_cast<long>(m.size());
    });
    return n;
  }
};

// Leaf ids of every model parameter on a tape, same traversal order.
struct ModelVars {
  std::vector<Tape::VarId> leaves;
  std::vector<std::string> names;
  Tape::VarId tok_embed = -1, out_bias = -1;
  struct Layer {
    Tape::VarId wq, wk, wv, bv, wo, bo, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln1_g, ln1_b, ln2_g,
        ln2_b;
  };
  std::vector<Layer> layers;
  Tape::VarId pos_table = -1, uq = -1, uk = -1, bucket = -1, theta1 = -1, theta2 = -1;
  Tape::VarId sin_table = -1;
};

inline ModelVars record_model(Tape& tape, EncoderModel& model) {
  ModelVars v;
  std::vector<Tape::VarId> flat;
  model.visit_params([&](const std::string& name, Matrix& m) {
    Tape::VarId id = tape.leaf(m);
    v.leaves.push_back(id);
    v.names.push_back(name);
    flat.push_back(id);
  });
  size_t at = 0;
  v.tok_embed = flat[at++];
  v.out_bias = flat[at++];
  v.layers.resize(model.layers.size());
  for (auto& l : v.layers) {
    l.wq = flat[at++];
    l.wk = flat[at++];
    l.wv = flat[at++];
    l.bv = flat[at++];
    l.wo = flat[at++];
    l.bo = flat[at++];
    l.ffn_w1 = flat[at++];
    l.ffn_b1 = flat[at++];
    l.ffn_w2 = flat[at++];
    l.ffn_b2 = flat[at++];
    l.ln1_g = flat[at++];
    l.ln1_b = flat[at++];
    l.ln2_g = flat[at++];
    l.ln2_b = flat[at++];
  }
  auto take_named = [&](const char* name) -> Tape::VarId {
    for (size_t i = 0; i < v.names.size(); ++i)
      if (v.names[i] == name) return v.leaves[i];
    return -1;
  };
  v.pos_table = take_named("pos.table");
  v.uq = take_named("pos.uq");
  v.uk = take_named("pos.uk");
  v.bucket = take_named("pos.bucket_bias");
  v.theta1 = take_named("pos.theta1");
  v.theta2 = take_named("pos.theta2");
  if (model.config.posenc.kind == PosEncKind::kSinusoidal)
    v.sin_table = tape.leaf(model.sin_table);
  return v;
}

struct ForwardOpts {
  bool train = false;
  Rng* dropout_rng = nullptr;
};

namespace detail {

inline Matrix dropout_mask(int rows, int cols, double p, Rng& rng) {
  Matrix m(rows, cols);
  double keep = 1.0 - p;
  for (double& v : m.data) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return m;
}

// Separate word/position inputs are carried for layer 1 of the additive
// kinds so the four-term logit expansion stays computable; deeper layers
// only have the fused hidden state.
struct AttnInputs {
  Tape::VarId fused = -1;
  Tape::VarId word = -1;
  Tape::VarId pos = -1;
};

// Pre-softmax attention logits for one head, scaling applied, positional
// machinery included. `tupe_bias` is the precomputed per-forward bias for
// this head (shared parameters make it identical at every layer).
inline Tape::VarId head_logits(Tape& tape, const EncoderConfig& cfg, const ModelVars& vars,
                               const AttnInputs& in, int layer, int head, int qlen,
                               Tape::VarId tupe_bias) {
  const auto& lv = vars.layers[layer];
  const int dh = cfg.d_head();
  const int lo = head * dh, hi = (head + 1) * dh;
  const PosEncKind kind = cfg.posenc.kind;
  auto head_slice = [&](Tape::VarId m) {
    return cfg.heads == 1 ? m : tape.slice_cols(m, lo, hi);
  };

  const bool decomposed = layer == 0 && kind == PosEncKind::kAbsolute && in.word >= 0;
  if (decomposed) {
    const AblationFlags& ab = cfg.ablation;
    Tape::VarId pos_q = ab.untie_word_position_params ? vars.uq : lv.wq;
    Tape::VarId pos_k = ab.untie_word_position_params ? vars.uk : lv.wk;
    Tape::VarId wq = head_slice(tape.matmul(in.word, lv.wq));
    Tape::VarId wk = head_slice(tape.matmul(in.word, lv.wk));
    Tape::VarId pq = head_slice(tape.matmul(in.pos, pos_q));
    Tape::VarId pk = head_slice(tape.matmul(in.pos, pos_k));
    Tape::VarId logits = tape.matmul_nt(wq, wk);  // word-word always kept
    if (!ab.drop_word_position) logits = tape.add(logits, tape.matmul_nt(wq, pk));
    if (!ab.drop_position_word) logits = tape.add(logits, tape.matmul_nt(pq, wk));
    if (!ab.drop_position_position) logits = tape.add(logits, tape.matmul_nt(pq, pk));
    return tape.scale(logits, 1.0 / std::sqrt(static_cast<double>(dh)));
  }

  Tape::VarId q = head_slice(tape.matmul(in.fused, lv.wq));
  Tape::VarId k = head_slice(tape.matmul(in.fused, lv.wk));
  Tape::VarId logits = tape.matmul_nt(q, k);

  if (is_relative(kind)) {
    IntMat off = relative_offset_grid(qlen, qlen, cfg.posenc.max_positions);
    Tape::VarId table = head_slice(vars.pos_table);
    logits = tape.add(logits, tape.rel_scores_q(q, table, off));
    if (kind == PosEncKind::kRelativeKeyQuery) {
      logits = tape.add(logits, tape.rel_scores_k(k, table, off));
      logits = tape.add(logits, tape.rel_self(table, off));
    }
  }

  double scaling = is_tupe(kind) ? 1.0 / std::sqrt(2.0 * dh)
                                 : 1.0 / std::sqrt(static_cast<double>(dh));
  logits = tape.scale(logits, scaling);
  if (is_tupe(kind)) logits = tape.add(logits, tupe_bias);
  return logits;
}

}  // namespace detail

// Forward pass over one id sequence, returning the variable ids of the
// hidden states for layers 0..L. Layer 0 is the embedding-stage output:
// token embeddings (scaled and summed with the encoding for the additive
// kinds, bare otherwise).
inline std::vector<Tape::VarId> encode_states_on_tape(Tape& tape, const EncoderConfig& cfg,
                                                      const ModelVars& vars,
                                                      const std::vector<int>& ids,
                                                      const ForwardOpts& opts = {}) {
  const int len = static_cast<int>(ids.size());
  if (len == 0) throw std::invalid_argument("encoder: empty input");
  if (len > cfg.max_seq_len)
    throw std::invalid_argument("encoder: input length " + std::to_string(len) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  const PosEncKind kind = cfg.posenc.kind;

  std::vector<int> positions(len);
  for (int i = 0; i < len; ++i) positions[i] = i;

  Tape::VarId word = tape.gather_rows(vars.tok_embed, ids);
  Tape::VarId pos_emb = -1;
  Tape::VarId x;
  if (kind == PosEncKind::kSinusoidal) {
    word = tape.scale(word, 2.0 * std::sqrt(static_cast<double>(cfg.d_model)));
    pos_emb = tape.gather_rows(vars.sin_table, positions);
    x = tape.add(word, pos_emb);
  } else if (kind == PosEncKind::kAbsolute) {
    if (len > cfg.posenc.max_positions)
      throw std::invalid_argument("encoder: input exceeds max_positions");
    pos_emb = tape.gather_rows(vars.pos_table, positions);
    x = tape.add(word, pos_emb);
  } else {
    x = word;
  }

  std::vector<Tape::VarId> states;
  states.reserve(cfg.layers + 1);
  states.push_back(x);

  // Key-side padding mask: pad columns never receive attention mass.
  Matrix attn_mask = Matrix::filled(len, len, 1.0);
  bool has_pad = false;
  for (int j = 0; j < len; ++j)
    if (ids[j] == kPad) {
      has_pad = true;
      for (int i = 0; i < len; ++i) attn_mask.at(i, j) = 0.0;
    }
  if (has_pad) {
    for (int i = 0; i < len; ++i)
      if (ids[i] == kPad) attn_mask.at(i, i) = 1.0;  // keep pad rows well-defined
  }

  // TUPE bias: one shared parameter set, computed once and re-added at
  // every layer (per head).
  std::vector<Tape::VarId> tupe_bias(cfg.heads, -1);
  if (is_tupe(kind)) {
    detail::TupeBiasVars tb;
    tb.table = vars.pos_table;
    tb.uq = vars.uq;
    tb.uk = vars.uk;
    tb.bucket = vars.bucket;
    tb.theta1 = vars.theta1;
    tb.theta2 = vars.theta2;
    if (cfg.heads == 1) {
      tupe_bias[0] = detail::tupe_bias_on_tape(tape, cfg.posenc, tb, len, len, cfg.d_head());
    } else {
      // per-head bias from the head's slice of the shared U projections
      Tape::VarId prows = tape.gather_rows(vars.pos_table, positions);
      Tape::VarId pq_full = tape.matmul(prows, vars.uq);
      Tape::VarId pk_full = tape.matmul(prows, vars.uk);
      for (int h = 0; h < cfg.heads; ++h) {
        Tape::VarId pq = tape.slice_cols(pq_full, h * cfg.d_head(), (h + 1) * cfg.d_head());
        Tape::VarId pk = tape.slice_cols(pk_full, h * cfg.d_head(), (h + 1) * cfg.d_head());
        Tape::VarId bias = tape.scale(tape.matmul_nt(pq, pk), 1.0 / std::sqrt(2.0 * cfg.d_head()));
        if (kind == PosEncKind::kTupeRelative)
          bias = tape.add(bias, tape.bucket_bias(vars.bucket,
                                                 bucket_grid(len, len, cfg.posenc.max_positions,
                                                             cfg.posenc.num_buckets)));
        if (cfg.posenc.untie_cls) bias = tape.overwrite_row0_col0(bias, vars.theta1, vars.theta2);
        tupe_bias[h] = bias;
      }
    }
  }

  for (int layer = 0; layer < cfg.layers; ++layer) {
    const auto& lv = vars.layers[layer];
    detail::AttnInputs in;
    in.fused = x;
    if (layer == 0 && kind == PosEncKind::kAbsolute) {
      in.word = word;
      in.pos = pos_emb;
    }

    std::vector<Tape::VarId> head_ctx(cfg.heads);
    Tape::VarId v_full = tape.add_rowvec(tape.matmul(x, lv.wv), lv.bv);
    for (int h = 0; h < cfg.heads; ++h) {
      Tape::VarId logits = detail::head_logits(tape, cfg, vars, in, layer, h, len, tupe_bias[h]);
      Tape::VarId probs = tape.softmax_rows(logits, attn_mask);
      if (opts.train && cfg.dropout > 0.0)
        probs = tape.hadamard_const(probs, detail::dropout_mask(len, len, cfg.dropout,
                                                                *opts.dropout_rng));
      Tape::VarId vh = cfg.heads == 1 ? v_full
                                      : tape.slice_cols(v_full, h * cfg.d_head(),
                                                        (h + 1) * cfg.d_head());
      head_ctx[h] = tape.matmul(probs, vh);
    }
    Tape::VarId ctx = cfg.heads == 1 ? head_ctx[0] : tape.concat_cols(head_ctx);
    Tape::VarId attn_out = tape.add_rowvec(tape.matmul(ctx, lv.wo), lv.bo);
    if (opts.train && cfg.dropout > 0.0)
      attn_out = tape.hadamard_const(attn_out, detail::dropout_mask(len, cfg.d_model,
                                                                    cfg.dropout,
                                                                    *opts.dropout_rng));
    x = tape.layer_norm(tape.add(x, attn_out), lv.ln1_g, lv.ln1_b, cfg.ln_eps);

    Tape::VarId hidden = tape.gelu(tape.add_rowvec(tape.matmul(x, lv.ffn_w1), lv.ffn_b1));
    Tape::VarId ffn_out = tape.add_rowvec(tape.matmul(hidden, lv.ffn_w2), lv.ffn_b2);
    if (opts.train && cfg.dropout > 0.0)
      ffn_out = tape.hadamard_const(ffn_out, detail::dropout_mask(len, cfg.d_model,
                                                                  cfg.dropout,
                                                                  *opts.dropout_rng));
    x = tape.layer_norm(tape.add(x, ffn_out), lv.ln2_g, lv.ln2_b, cfg.ln_eps);
    states.push_back(x);
  }
  return states;
}

// Spec-level single-call view of the layer logits (head 0). For layer 1 of
// the additive kinds, pass the word/position components; deeper layers use
// the fused state only.
inline Matrix attention_logits(EncoderModel& model, const Matrix& fused,
                               const Matrix* word_component, const Matrix* pos_component,
                               int layer) {
  model.config.validate();
  if (layer < 0 || layer >= model.config.layers)
    throw std::out_of_range("attention_logits: layer out of range");
  Tape tape;
  ModelVars vars = record_model(tape, model);
  detail::AttnInputs in;
  in.fused = tape.leaf(fused);
  if (word_component && pos_component) {
    in.word = tape.leaf(*word_component);
    in.pos = tape.leaf(*pos_component);
  }
  Tape::VarId bias = -1;
  if (is_tupe(model.config.posenc.kind)) {
    detail::TupeBiasVars tb;
    tb.table = vars.pos_table;
    tb.uq = vars.uq;
    tb.uk = vars.uk;
    tb.bucket = vars.bucket;
    tb.theta1 = vars.theta1;
    tb.theta2 = vars.theta2;
    bias = detail::tupe_bias_on_tape(tape, model.config.posenc, tb, fused.rows, fused.rows,
                                     model.config.d_head());
  }
  return tape.val(detail::head_logits(tape, model.config, vars, in, layer, 0, fused.rows, bias));
}

struct ForwardResult {
  std::vector<Matrix> states;  // layers+1 matrices, each len x d
  Matrix mlm_logits;           // len x vocab
};

// Evaluation forward: per-layer hidden states plus tied-embedding MLM
// logits for every position.
inline ForwardResult forward(EncoderModel& model, const std::vector<int>& ids) {
  Tape tape;
  ModelVars vars = record_model(tape, model);
  std::vector<Tape::VarId> states = encode_states_on_tape(tape, model.config, vars, ids);
  Tape::VarId logits = tape.add_rowvec(tape.matmul_nt(states.back(), vars.tok_embed),
                                       vars.out_bias);
  ForwardResult r;
  r.states.reserve(states.size());
  for (Tape::VarId s : states) r.states.push_back(tape.val(s));
  r.mlm_logits = tape.val(logits);
  return r;
}

// Mean cross-entropy over the masked positions of one sequence. Labels are
// aligned with positions; entries < 0 mean "not masked".
inline double mlm_loss(const Matrix& logits, const std::vector<int>& labels) {
  if (static_cast<int>(labels.size()) != logits.rows)
    throw std::invalid_argument("mlm_loss: one label per position required");
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < logits.rows; ++i) {
    if (labels[i] < 0) continue;
    if (labels[i] >= logits.cols) throw std::out_of_range("mlm_loss: label out of range");
    double mx = logits.at(i, 0);
    for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (int j = 0; j < logits.cols; ++j) z += std::exp(logits.at(i, j) - mx);
    total += mx + std::log(z) - logits.at(i, labels[i]);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("mlm_loss: zero masked positions");
  return total / count;
}

}  // namespace poslab
