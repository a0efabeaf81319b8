#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "poslab/matrix.hpp"
#include "poslab/rng.hpp"
#include "poslab/tape.hpp"

namespace poslab {

enum class PosEncKind {
  kSinusoidal,
  kAbsolute,
  kTupeAbsolute,
  kTupeRelative,
  kRelativeKey,
  kRelativeKeyQuery,
};

inline const char* posenc_kind_name(PosEncKind k) {
  switch (k) {
    case PosEncKind::kSinusoidal: return "sinusoidal";
    case PosEncKind::kAbsolute: return "absolute";
    case PosEncKind::kTupeAbsolute: return "tupe_absolute";
    case PosEncKind::kTupeRelative: return "tupe_relative";
    case PosEncKind::kRelativeKey: return "relative_key";
    case PosEncKind::kRelativeKeyQuery: return "relative_key_query";
  }
  return "?";
}

inline PosEncKind posenc_kind_from_name(const std::string& s) {
  if (s == "sinusoidal") return PosEncKind::kSinusoidal;
  if (s == "absolute") return PosEncKind::kAbsolute;
  if (s == "tupe_absolute") return PosEncKind::kTupeAbsolute;
  if (s == "tupe_relative") return PosEncKind::kTupeRelative;
  if (s == "relative_key") return PosEncKind::kRelativeKey;
  if (s == "relative_key_query") return PosEncKind::kRelativeKeyQuery;
  throw std::invalid_argument("unknown positional encoding kind: " + s);
}

inline bool is_tupe(PosEncKind k) {
  return k == PosEncKind::kTupeAbsolute || k == PosEncKind::kTupeRelative;
}
inline bool is_relative(PosEncKind k) {
  return k == PosEncKind::kRelativeKey || k == PosEncKind::kRelativeKeyQuery;
}
inline bool is_additive(PosEncKind k) {
  return k == PosEncKind::kSinusoidal || k == PosEncKind::kAbsolute;
}

// Tagged choice of one of the six mechanisms plus its hyperparameters.
struct PosEncSpec {
  PosEncKind kind = PosEncKind::kSinusoidal;
  int d_model = 64;
  int max_positions = 512;  // 128 for tupe_relative
  int num_buckets = 32;     // tupe_relative only
  bool untie_cls = true;    // TUPE kinds only

  static PosEncSpec make(PosEncKind kind, int d_model) {
    PosEncSpec s;
    s.kind = kind;
    s.d_model = d_model;
    if (kind == PosEncKind::kTupeRelative) s.max_positions = 128;
    s.validate();
    return s;
  }

  void validate() const {
    if (d_model <= 0 || d_model % 2 != 0)
      throw std::invalid_argument("posenc: d_model must be positive and even");
    if (max_positions < 1) throw std::invalid_argument("posenc: max_positions must be >= 1");
    if (kind == PosEncKind::kTupeRelative && num_buckets < 2)
      throw std::invalid_argument("posenc: num_buckets must be >= 2");
  }
};

// Learnable parameters per kind. Unused members stay empty.
struct PosParams {
  Matrix table;        // absolute/TUPE position table, or relative offset table
  Matrix uq, uk;       // untied position-projection parameters (d x d)
  Matrix bucket_bias;  // per-bucket scalars (num_buckets x 1)
  Matrix theta1, theta2;  // [CLS] untying scalars (1 x 1)
};

// p(pos, 2i) = sin(pos / 10000^(2i/d)), p(pos, 2i+1) = cos(pos / 10000^(2i/d))
inline Matrix sinusoidal_table(int max_pos, int d) {
  if (d <= 0 || d % 2 != 0)
    throw std::invalid_argument("sinusoidal_table: dimension must be positive and even");
  Matrix p(max_pos, d);
  for (int pos = 0; pos < max_pos; ++pos) {
    for (int i = 0; i < d / 2; ++i) {
      double omega = std::pow(10000.0, -2.0 * i / d);
      p.at(pos, 2 * i) = std::sin(pos * omega);
      p.at(pos, 2 * i + 1) = std::cos(pos * omega);
    }
  }
  return p;
}

// Block-diagonal rotation R_k with block i rotating by omega_i * k, chosen
// so that R_k applied to a sinusoidal row (as a column vector) advances it
// by k positions: R_k p_pos = p_{pos+k}.
inline Matrix offset_rotation(int k, int d) {
  if (d <= 0 || d % 2 != 0)
    throw std::invalid_argument("offset_rotation: dimension must be positive and even");
  Matrix r(d, d);
  for (int i = 0; i < d / 2; ++i) {
    double omega = std::pow(10000.0, -2.0 * i / d);
    double c = std::cos(omega * k), s = std::sin(omega * k);
    r.at(2 * i, 2 * i) = c;
    r.at(2 * i, 2 * i + 1) = s;
    r.at(2 * i + 1, 2 * i) = -s;
    r.at(2 * i + 1, 2 * i + 1) = c;
  }
  return r;
}

// Clipped relative offset index: clip(j - i, -(k-1), k-1) + (k-1),
// spanning [0, 2k-2] (1023 offsets at k = 512).
inline int relative_offset_index(int i, int j, int k) {
  if (k < 1) throw std::invalid_argument("relative_offset_index: k must be >= 1");
  int off = j - i;
  if (off < -(k - 1)) off = -(k - 1);
  if (off > k - 1) off = k - 1;
  return off + (k - 1);
}

namespace detail {
// 1:1 for magnitudes below half/2, logarithmic compression up to max_pos.
inline int log_bucket(int n, int half, int max_pos) {
  int max_exact = half / 2;
  if (n < max_exact) return n;
  int large = max_exact +
              static_cast<int>(std::log(static_cast<double>(n) / max_exact) /
                               std::log(static_cast<double>(max_pos) / max_exact) *
                               (half - max_exact));
  return large > half - 1 ? half - 1 : large;
}
}  // namespace detail

// Signed offset -> bucket: half the buckets per sign, exact mapping for
// small |offset|, logarithmic bin growth up to max_pos. The non-positive
// side owns buckets [0, half) with offset 0 in bucket 0; positive offsets
// fill [half, 2*half), so every bucket is reachable. Offsets beyond
// max_pos clip into the extreme bucket of their sign.
//
// Frozen bin boundaries for (max_pos=128, num_buckets=32) — first |offset|
// landing in each bucket:
//   buckets  0..15 (offset <= 0): 0 1 2 3 4 5 6 7 8 12 16 23 32 46 64 91
//   buckets 16..31 (offset >= 1): 1 2 3 4 5 6 7 8 9 13 17 24 33 47 65 92
inline int tupe_relative_bucket(int offset, int max_pos, int num_buckets) {
  if (num_buckets < 2 || num_buckets % 2 != 0)
    throw std::invalid_argument("tupe_relative_bucket: num_buckets must be even and >= 2");
  int half = num_buckets / 2;
  int n = std::abs(offset);
  if (n > max_pos) n = max_pos;
  if (offset <= 0) return detail::log_bucket(n, half, max_pos);
  return half + detail::log_bucket(n - 1, half, max_pos);
}

inline IntMat relative_offset_grid(int qlen, int klen, int k) {
  IntMat m(qlen, klen);
  for (int i = 0; i < qlen; ++i)
    for (int j = 0; j < klen; ++j) m.at(i, j) = relative_offset_index(i, j, k);
  return m;
}

inline IntMat bucket_grid(int qlen, int klen, int max_pos, int num_buckets) {
  IntMat m(qlen, klen);
  for (int i = 0; i < qlen; ++i)
    for (int j = 0; j < klen; ++j) m.at(i, j) = tupe_relative_bucket(j - i, max_pos, num_buckets);
  return m;
}

// Zero-init for relative tables (order-agnostic start); N(0, 0.02^2) for
// absolute/TUPE position tables.
inline PosParams init_pos_params(const PosEncSpec& spec, Rng& rng) {
  spec.validate();
  PosParams p;
  auto gauss = [&](int r, int c) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.normal(0.0, 0.02);
    return m;
  };
  switch (spec.kind) {
    case PosEncKind::kSinusoidal:
      break;
    case PosEncKind::kAbsolute:
      p.table = gauss(spec.max_positions, spec.d_model);
      break;
    case PosEncKind::kTupeRelative:
      p.bucket_bias = Matrix(spec.num_buckets, 1);
      [[fallthrough]];
    case PosEncKind::kTupeAbsolute:
      p.table = gauss(spec.max_positions, spec.d_model);
      p.uq = gauss(spec.d_model, spec.d_model);
      p.uk = gauss(spec.d_model, spec.d_model);
      if (spec.untie_cls) {
        p.theta1 = Matrix(1, 1);
        p.theta2 = Matrix(1, 1);
      }
      break;
    case PosEncKind::kRelativeKey:
    case PosEncKind::kRelativeKeyQuery:
      p.table = Matrix(2 * spec.max_positions - 1, spec.d_model);
      break;
  }
  return p;
}

// Additive embedding and/or pre-softmax bias produced by a kind for one
// (qlen, klen) shape. `scaling` is what attention applies to its logits.
struct AttnBias {
  Matrix embedding;  // qlen x d, additive kinds only (else empty)
  Matrix bias;       // qlen x klen, TUPE kinds only (else empty)
  double scaling = 0.0;
};

namespace detail {

// TUPE bias on a tape so gradients flow to the position parameters. The
// U-parameters are one shared set; the same bias is re-added at every
// layer. Scaling 1/sqrt(2*d_head) is folded into the bias here.
struct TupeBiasVars {
  Tape::VarId table, uq, uk, bucket = -1, theta1 = -1, theta2 = -1;
};

inline Tape::VarId tupe_bias_on_tape(Tape& tape, const PosEncSpec& spec,
                                     const TupeBiasVars& vars, int qlen, int klen,
                                     int d_head) {
  if (qlen > spec.max_positions || klen > spec.max_positions)
    throw std::invalid_argument("make_bias: sequence length exceeds max_positions " +
                                std::to_string(spec.max_positions));
  std::vector<int> qpos(qlen), kpos(klen);
  for (int i = 0; i < qlen; ++i) qpos[i] = i;
  for (int j = 0; j < klen; ++j) kpos[j] = j;
  Tape::VarId pq = tape.matmul(tape.gather_rows(vars.table, qpos), vars.uq);
  Tape::VarId pk = tape.matmul(tape.gather_rows(vars.table, kpos), vars.uk);
  Tape::VarId bias = tape.scale(tape.matmul_nt(pq, pk), 1.0 / std::sqrt(2.0 * d_head));
  if (spec.kind == PosEncKind::kTupeRelative) {
    bias = tape.add(bias, tape.bucket_bias(vars.bucket,
                                           bucket_grid(qlen, klen, spec.max_positions,
                                                       spec.num_buckets)));
  }
  if (spec.untie_cls) bias = tape.overwrite_row0_col0(bias, vars.theta1, vars.theta2);
  return bias;
}

}  // namespace detail

// Pure evaluation of a kind's contribution for one shape. The relative
// kinds return neither embedding nor bias: their offset vectors are
// consumed inside the attention computation itself. `layer` only matters
// for validity; TUPE parameters are shared, so the bias is identical at
// every layer.
inline AttnBias make_bias(const PosEncSpec& spec, const PosParams& params, int qlen,
                          int klen, int layer) {
  (void)layer;
  spec.validate();
  if (qlen > spec.max_positions || klen > spec.max_positions)
    throw std::invalid_argument("make_bias: sequence length exceeds max_positions " +
                                std::to_string(spec.max_positions));
  AttnBias out;
  switch (spec.kind) {
    case PosEncKind::kSinusoidal: {
      out.embedding = sinusoidal_table(qlen, spec.d_model);
      out.scaling = 1.0 / std::sqrt(static_cast<double>(spec.d_model));
      break;
    }
    case PosEncKind::kAbsolute: {
      out.embedding = params.table.slice_rows(0, qlen);
      out.scaling = 1.0 / std::sqrt(static_cast<double>(spec.d_model));
      break;
    }
    case PosEncKind::kTupeAbsolute:
    case PosEncKind::kTupeRelative: {
      Tape tape;
      detail::TupeBiasVars vars;
      vars.table = tape.leaf(params.table);
      vars.uq = tape.leaf(params.uq);
      vars.uk = tape.leaf(params.uk);
      if (spec.kind == PosEncKind::kTupeRelative) vars.bucket = tape.leaf(params.bucket_bias);
      if (spec.untie_cls) {
        vars.theta1 = tape.leaf(params.theta1);
        vars.theta2 = tape.leaf(params.theta2);
      }
      out.bias = tape.val(detail::tupe_bias_on_tape(tape, spec, vars, qlen, klen,
                                                    spec.d_model));
      out.scaling = 1.0 / std::sqrt(2.0 * spec.d_model);
      break;
    }
    case PosEncKind::kRelativeKey:
    case PosEncKind::kRelativeKeyQuery: {
      out.scaling = 1.0 / std::sqrt(static_cast<double>(spec.d_model));
      break;
    }
  }
  return out;
}

}  // namespace poslab
