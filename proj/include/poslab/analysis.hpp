#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "poslab/encoder.hpp"
#include "poslab/matrix.hpp"
#include "poslab/rng.hpp"
#include "poslab/svd.hpp"

namespace poslab {

// Best orthogonal T minimizing sum_r |A_r - T B_r|^2 over the rows of A
// and B (closed form via the SVD of B^T A). Rows are treated as column
// vectors under T, i.e. the fitted map satisfies A ~ B T^T row-wise.
inline Matrix fit_orthogonal_procrustes(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("procrustes: shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  SvdResult s = svd(matmul_tn(b, a));
  return matmul_nt(s.v, s.u);
}

// |A - B T^T|^2, optionally normalized by rows*cols.
inline double procrustes_loss(const Matrix& a, const Matrix& b, const Matrix& t,
                              bool normalized = true) {
  Matrix mapped = matmul_nt(b, t);
  double loss = frobenius_sq(sub(a, mapped));
  if (normalized) loss /= static_cast<double>(a.rows) * a.cols;
  return loss;
}

struct ProcrustesResult {
  int offset = 0;
  std::vector<double> losses;       // per-run held-out loss, normalized by C*d
  std::vector<int> chunk_sizes;
  int runs = 0;
  double mean_loss = 0.0;
  double median_loss = 0.0;
};

namespace detail {

// C distinct values from [0, range), deterministic partial Fisher-Yates.
inline std::vector<int> sample_positions(Rng& rng, int range, int c) {
  std::vector<int> pool(range);
  for (int i = 0; i < range; ++i) pool[i] = i;
  for (int i = 0; i < c; ++i) std::swap(pool[i], pool[rng.uniform_int(i, range - 1)]);
  pool.resize(c);
  return pool;
}

inline Matrix gather_table_rows(const Matrix& table, const std::vector<int>& rows, int shift) {
  Matrix out(static_cast<int>(rows.size()), table.cols);
  for (size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < table.cols; ++j)
      out.at(static_cast<int>(i), j) = table.at(rows[i] + shift, j);
  return out;
}

}  // namespace detail

// Quantifies how close a fixed positional offset is to a single linear
// map: fit T on a random chunk of positions paired with their k-shifted
// rows, then evaluate it on a held-out chunk. Low held-out loss means the
// encoding composes across positions.
//
// Chunks are C positions sampled without replacement across the whole
// valid range, with C at least table-width + 4: fewer rows than dimensions
// leave the orthogonal fit underdetermined outside the chunk's span, and
// contiguous windows leave the slow sinusoid dimensions unconstrained, so
// either choice would score even exactly-compositional tables as lossy.
// The held-out chunk is disjoint from the fitting chunk whenever the table
// is large enough to allow it.
inline ProcrustesResult compositionality_loss(const Matrix& table, int k, int runs, Rng& rng,
                                              int chunk_min = 0, int chunk_max = 0) {
  if (k < 0) throw std::invalid_argument("compositionality_loss: negative offset");
  const int rows = table.rows;
  const int d = table.cols;
  const int avail = rows - k;  // valid chunk positions: p and p + k must exist
  int cmin = chunk_min > 0 ? chunk_min : d + 4;
  int cmax = std::min(chunk_max > 0 ? chunk_max : d + 36, avail);
  if (cmax < cmin)
    throw std::invalid_argument("compositionality_loss: offset " + std::to_string(k) +
                                " too large for a " + std::to_string(rows) + "-row table");
  ProcrustesResult res;
  res.offset = k;
  res.runs = runs;
  for (int run = 0; run < runs; ++run) {
    int c = rng.uniform_int(cmin, cmax);
    std::vector<int> fit_pos, eval_pos;
    if (avail >= 2 * c) {
      std::vector<int> both = detail::sample_positions(rng, avail, 2 * c);
      fit_pos.assign(both.begin(), both.begin() + c);
      eval_pos.assign(both.begin() + c, both.end());
    } else {
      fit_pos = detail::sample_positions(rng, avail, c);
      eval_pos = detail::sample_positions(rng, avail, c);
    }
    Matrix t = fit_orthogonal_procrustes(detail::gather_table_rows(table, fit_pos, 0),
                                         detail::gather_table_rows(table, fit_pos, k));
    res.losses.push_back(procrustes_loss(detail::gather_table_rows(table, eval_pos, 0),
                                         detail::gather_table_rows(table, eval_pos, k), t,
                                         true));
    res.chunk_sizes.push_back(c);
  }
  double sum = 0.0;
  for (double l : res.losses) sum += l;
  res.mean_loss = sum / runs;
  std::vector<double> sorted = res.losses;
  std::sort(sorted.begin(), sorted.end());
  res.median_loss = runs % 2 ? sorted[runs / 2]
                             : 0.5 * (sorted[runs / 2 - 1] + sorted[runs / 2]);
  return res;
}

// The encoding table the compositionality and export analyses operate on.
// TUPE kinds analyze the raw P table by default; post_projection swaps in
// P U^K (the key-side projected encodings).
inline Matrix analysis_encoding_table(const EncoderModel& model, bool post_projection = false) {
  switch (model.config.posenc.kind) {
    case PosEncKind::kSinusoidal:
      return model.sin_table;
    case PosEncKind::kAbsolute:
      return model.pos.table;
    case PosEncKind::kTupeAbsolute:
    case PosEncKind::kTupeRelative:
      return post_projection ? matmul(model.pos.table, model.pos.uk) : model.pos.table;
    case PosEncKind::kRelativeKey:
    case PosEncKind::kRelativeKeyQuery:
      return model.pos.table;
  }
  throw std::logic_error("analysis_encoding_table: unreachable");
}

struct CorrelationMatrix {
  Matrix values;  // word types x positions
  int layer = 1;
  std::string source;
};

// Layer-1 word/position attention cross terms for additive-table kinds:
//   word-as-query:     (E[v] W^Q)(P[t] W^K)^T / sqrt(d)
//   position-as-query: (P[t] W^Q)(E[v] W^K)^T / sqrt(d)
// Both come back in word x position layout.
inline std::pair<CorrelationMatrix, CorrelationMatrix> word_position_correlation(
    const EncoderModel& model, int positions, const std::vector<int>& vocab_sample) {
  const PosEncKind kind = model.config.posenc.kind;
  if (!is_additive(kind))
    throw std::invalid_argument(
        "word_position_correlation: requires an additive position table (absolute or "
        "sinusoidal)");
  const Matrix& table =
      kind == PosEncKind::kSinusoidal ? model.sin_table : model.pos.table;
  if (positions > table.rows)
    throw std::invalid_argument("word_position_correlation: positions exceed table");

  const int d = model.config.d_model;
  Matrix e(static_cast<int>(vocab_sample.size()), d);
  for (size_t i = 0; i < vocab_sample.size(); ++i)
    for (int j = 0; j < d; ++j)
      e.at(static_cast<int>(i), j) = model.tok_embed.at(vocab_sample[i], j);
  Matrix p = table.slice_rows(0, positions);

  const Matrix& wq = model.layers[0].wq;
  const Matrix& wk = model.layers[0].wk;
  double inv = 1.0 / std::sqrt(static_cast<double>(d));

  CorrelationMatrix word_query, pos_query;
  word_query.values = scale(matmul_nt(matmul(e, wq), matmul(p, wk)), inv);
  pos_query.values = scale(transpose(matmul_nt(matmul(p, wq), matmul(e, wk))), inv);
  return {word_query, pos_query};
}

// Mean over positions (columns) of the across-word (row) variance.
inline double banding_statistic(const Matrix& m) {
  double total = 0.0;
  for (int j = 0; j < m.cols; ++j) {
    double mean = 0.0;
    for (int i = 0; i < m.rows; ++i) mean += m.at(i, j);
    mean /= m.rows;
    double var = 0.0;
    for (int i = 0; i < m.rows; ++i) {
      double d = m.at(i, j) - mean;
      var += d * d;
    }
    total += var / m.rows;
  }
  return total / m.cols;
}

// Per-matrix z-scored copy.
inline Matrix zscore(const Matrix& m) {
  double mean = 0.0;
  for (double v : m.data) mean += v;
  mean /= static_cast<double>(m.size());
  double var = 0.0;
  for (double v : m.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(m.size());
  double inv = var > 0 ? 1.0 / std::sqrt(var) : 0.0;
  Matrix out = m;
  for (double& v : out.data) v = (v - mean) * inv;
  return out;
}

struct EncodingDimPoint {
  int position = 0;  // absolute position, or signed offset for relative kinds
  int dim = 0;
  double value = 0.0;
};

// Selected encoding dimensions over a position range, ready for plotting.
// Relative kinds export a 32-offset window centered on the zero offset.
inline std::vector<EncodingDimPoint> export_encoding_dims(const EncoderModel& model,
                                                          const std::vector<int>& dims,
                                                          int positions) {
  for (int d : dims)
    if (d < 0 || d >= model.config.d_model)
      throw std::invalid_argument("export_encoding_dims: dim out of range");
  const PosEncKind kind = model.config.posenc.kind;
  const Matrix table = analysis_encoding_table(model);
  std::vector<EncodingDimPoint> out;
  if (is_relative(kind)) {
    int center = model.config.posenc.max_positions - 1;  // zero offset row
    int half = positions / 2;
    for (int off = -half; off < positions - half; ++off) {
      int row = center + off;
      if (row < 0 || row >= table.rows) continue;
      for (int d : dims) out.push_back({off, d, table.at(row, d)});
    }
  } else {
    if (positions > table.rows)
      throw std::invalid_argument("export_encoding_dims: positions exceed table");
    for (int pos = 0; pos < positions; ++pos)
      for (int d : dims) out.push_back({pos, d, table.at(pos, d)});
  }
  return out;
}

struct WilcoxonResult {
  int n = 0;  // pairs with non-zero difference
  double w_plus = 0.0, w_minus = 0.0;
  double z = 0.0;
  double p_two_sided = 1.0;
  bool exact = false;
  std::vector<double> ranks;  // rank of |d_i| for each retained pair
};

// Wilcoxon signed-rank test for paired samples. Exact null distribution
// for n <= 25 without ties in |d|, normal approximation (tie-corrected,
// continuity-corrected) otherwise.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x,
                                           const std::vector<double>& y) {
  if (x.size() != y.size())
    throw std::invalid_argument("wilcoxon: samples must be paired");
  std::vector<double> diffs;
  for (size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    if (d != 0.0) diffs.push_back(d);
  }
  WilcoxonResult r;
  r.n = static_cast<int>(diffs.size());
  if (r.n == 0) return r;

  std::vector<int> order(diffs.size());
  for (size_t i = 0; i < diffs.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return std::abs(diffs[a]) < std::abs(diffs[b]);
  });

  r.ranks.assign(diffs.size(), 0.0);
  bool tied = false;
  double tie_term = 0.0;  // sum over tie groups of t^3 - t
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j + 1 < order.size() &&
           std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]]))
      ++j;
    double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) r.ranks[order[k]] = avg_rank;
    if (j > i) {
      tied = true;
      double t = static_cast<double>(j - i + 1);
      tie_term += t * t * t - t;
    }
    i = j + 1;
  }

  for (size_t i = 0; i < diffs.size(); ++i)
    (diffs[i] > 0 ? r.w_plus : r.w_minus) += r.ranks[i];

  const int n = r.n;
  if (!tied && n <= 25) {
    // exact two-sided p via the subset-sum distribution of W+
    long max_sum = n * (n + 1) / 2;
    std::vector<double> ways(max_sum + 1, 0.0);
    ways[0] = 1.0;
    for (int k = 1; k <= n; ++k)
      for (long s = max_sum; s >= k; --s) ways[s] += ways[s - k];
    double total = std::pow(2.0, n);
    double w_min = std::min(r.w_plus, r.w_minus);
    double cum = 0.0;
    for (long s = 0; s <= static_cast<long>(w_min); ++s) cum += ways[s];
    r.p_two_sided = std::min(1.0, 2.0 * cum / total);
    r.exact = true;
    return r;
  }

  double mean = n * (n + 1) / 4.0;
  double var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0;
  double w = std::min(r.w_plus, r.w_minus);
  double cc = w < mean ? 0.5 : -0.5;  // continuity correction toward the mean
  r.z = (w - mean + cc) / std::sqrt(var);
  r.p_two_sided = std::min(1.0, std::erfc(std::abs(r.z) / std::sqrt(2.0)));
  return r;
}

}  // namespace poslab
