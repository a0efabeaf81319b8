#pragma once

#include <functional>
#include <string>
#include <vector>

#include "poslab/matrix.hpp"
#include "poslab/rng.hpp"
#include "poslab/tape.hpp"

namespace poslab::testing {

inline Matrix random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.normal(0.0, scale);
  return m;
}

inline Matrix random_orthogonal(int n, Rng& rng) {
  // Gram-Schmidt on a random Gaussian matrix
  Matrix a = random_matrix(n, n, rng);
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < j; ++k) {
      double proj = 0;
      for (int i = 0; i < n; ++i) proj += a.at(i, j) * a.at(i, k);
      for (int i = 0; i < n; ++i) a.at(i, j) -= proj * a.at(i, k);
    }
    double norm = 0;
    for (int i = 0; i < n; ++i) norm += a.at(i, j) * a.at(i, j);
    norm = std::sqrt(norm);
    for (int i = 0; i < n; ++i) a.at(i, j) /= norm;
  }
  return a;
}

// Central finite-difference check of tape gradients. `build` must map the
// current leaf values to a scalar loss variable deterministically. Every
// coordinate of every leaf is probed when `max_coords_per_leaf` is 0.
struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
  std::string worst;
};

inline GradCheckResult check_gradients(
    std::vector<Matrix> leaves,
    const std::function<Tape::VarId(Tape&, const std::vector<Tape::VarId>&)>& build,
    double step = 1e-5, int max_coords_per_leaf = 0, uint64_t probe_seed = 7) {
  auto eval = [&](const std::vector<Matrix>& vals, std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Tape::VarId> ids;
    for (const Matrix& m : vals) ids.push_back(tape.leaf(m));
    Tape::VarId loss = build(tape, ids);
    double out = tape.val(loss).data[0];
    if (grads) *grads = gradient(tape, loss, ids);
    return out;
  };

  std::vector<Matrix> grads;
  eval(leaves, &grads);

  GradCheckResult res;
  Rng probe(probe_seed);
  for (size_t l = 0; l < leaves.size(); ++l) {
    std::vector<int> coords;
    int n = static_cast<int>(leaves[l].size());
    if (max_coords_per_leaf <= 0 || n <= max_coords_per_leaf) {
      for (int i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords_per_leaf; ++i) coords.push_back(probe.uniform_int(0, n - 1));
    }
    for (int c : coords) {
      double saved = leaves[l].data[c];
      leaves[l].data[c] = saved + step;
      double up = eval(leaves, nullptr);
      leaves[l].data[c] = saved - step;
      double down = eval(leaves, nullptr);
      leaves[l].data[c] = saved;
      double fd = (up - down) / (2.0 * step);
      double an = grads[l].data[c];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      double rel = std::abs(fd - an) / denom;
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "leaf " + std::to_string(l) + " coord " + std::to_string(c) + " fd=" +
                    std::to_string(fd) + " grad=" + std::to_string(an);
      }
    }
  }
  return res;
}

}  // namespace poslab::testing
