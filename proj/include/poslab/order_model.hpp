#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "poslab/conllu.hpp"
#include "poslab/rng.hpp"

namespace poslab {

// Empirical word-order statistics for the dependants of NOUN and VERB
// heads, harvested from a treebank. The primary table maps the multiset of
// dependant relations to observed linearizations (head marker included);
// the backoff table holds per-relation head-side counts for multisets
// never seen in training.
struct OrderModel {
  static constexpr const char* kHeadMarker = "*HEAD*";

  // key: head UPOS + "|" + sorted deprels, value: linearization -> count
  std::map<std::string, std::map<std::vector<std::string>, long>> orderings;
  // key: head UPOS + "|" + deprel, value: (left-of-head, right-of-head)
  std::map<std::string, std::pair<long, long>> side_counts;

  static bool reorderable_head(const std::string& upos) {
    return upos == "NOUN" || upos == "VERB";
  }

  static std::string multiset_key(const std::string& upos,
                                  std::vector<std::string> deprels) {
    std::sort(deprels.begin(), deprels.end());
    std::string key = upos + "|";
    for (size_t i = 0; i < deprels.size(); ++i) {
      if (i) key += ",";
      key += deprels[i];
    }
    return key;
  }

  bool empty() const { return orderings.empty() && side_counts.empty(); }
};

// Children of each node in surface order; index 0 holds the root's children.
inline std::vector<std::vector<int>> children_lists(const DepSentence& s) {
  std::vector<std::vector<int>> kids(s.size() + 1);
  for (int i = 1; i <= s.size(); ++i) kids[s.heads[i - 1]].push_back(i);
  return kids;
}

inline OrderModel collect_order_stats(const std::vector<DepSentence>& treebank) {
  if (treebank.empty())
    throw std::invalid_argument("collect_order_stats: empty treebank");
  OrderModel m;
  for (const DepSentence& s : treebank) {
    auto kids = children_lists(s);
    for (int h = 1; h <= s.size(); ++h) {
      if (!OrderModel::reorderable_head(s.upos[h - 1])) continue;
      const std::vector<int>& deps = kids[h];
      if (deps.empty()) continue;
      std::vector<std::string> rels;
      rels.reserve(deps.size());
      std::vector<std::string> linearization;
      bool head_placed = false;
      for (int d : deps) {
        if (!head_placed && d > h) {
          linearization.push_back(OrderModel::kHeadMarker);
          head_placed = true;
        }
        linearization.push_back(s.deprels[d - 1]);
        rels.push_back(s.deprels[d - 1]);
        auto& side = m.side_counts[s.upos[h - 1] + "|" + s.deprels[d - 1]];
        if (d < h) side.first++;
        else side.second++;
      }
      if (!head_placed) linearization.push_back(OrderModel::kHeadMarker);
      m.orderings[OrderModel::multiset_key(s.upos[h - 1], rels)][linearization]++;
    }
  }
  return m;
}

enum class ReorderPolicy { kSample, kModal };

namespace detail {

inline std::vector<std::string> pick_ordering(
    const std::map<std::vector<std::string>, long>& table, Rng& rng, ReorderPolicy policy) {
  if (policy == ReorderPolicy::kModal) {
    const std::vector<std::string>* best = nullptr;
    long best_count = -1;
    for (const auto& [lin, count] : table)
      if (count > best_count) {
        best = &lin;
        best_count = count;
      }
    return *best;
  }
  std::vector<double> weights;
  std::vector<const std::vector<std::string>*> lins;
  for (const auto& [lin, count] : table) {
    lins.push_back(&lin);
    weights.push_back(static_cast<double>(count));
  }
  return *lins[rng.categorical(weights)];
}

}  // namespace detail

// Re-linearizes a projective sentence so that the dependants of NOUN and
// VERB heads follow the order statistics of the model. Each dependant
// moves as a contiguous subtree block; token multiset, tree topology and
// relation labels are untouched, and the result stays projective.
inline DepSentence reorder_sentence(const DepSentence& s, const OrderModel& m, Rng& rng,
                                    ReorderPolicy policy = ReorderPolicy::kSample) {
  std::string why;
  if (!s.is_valid_tree(&why))
    throw std::invalid_argument("reorder_sentence: invalid tree (" + why + ")");
  if (!is_projective(s))
    throw std::invalid_argument("reorder_sentence: non-projective input");

  auto kids = children_lists(s);

  // Returns original 1-based indices in their new surface order for the
  // subtree rooted at `node`.
  std::function<std::vector<int>(int)> linearize = [&](int node) -> std::vector<int> {
    const std::vector<int>& deps = kids[node];
    if (deps.empty()) return {node};

    std::vector<std::vector<int>> blocks(deps.size());
    for (size_t i = 0; i < deps.size(); ++i) blocks[i] = linearize(deps[i]);

    std::vector<std::string> arrangement;  // deprels + head marker, new order
    const std::string& upos = s.upos[node - 1];
    bool resample = OrderModel::reorderable_head(upos);
    if (resample) {
      std::vector<std::string> rels;
      for (int d : deps) rels.push_back(s.deprels[d - 1]);
      auto it = m.orderings.find(OrderModel::multiset_key(upos, rels));
      if (it != m.orderings.end()) {
        arrangement = detail::pick_ordering(it->second, rng, policy);
      } else {
        // backoff: sample each dependant's side independently, keep the
        // original relative order within each side
        std::vector<int> lefts, rights;
        for (size_t i = 0; i < deps.size(); ++i) {
          auto side_it = m.side_counts.find(upos + "|" + s.deprels[deps[i] - 1]);
          bool left;
          if (side_it == m.side_counts.end()) {
            left = deps[i] < node;  // relation unseen in training: keep side
          } else {
            long l = side_it->second.first, r = side_it->second.second;
            double p_left = static_cast<double>(l) / static_cast<double>(l + r);
            left = policy == ReorderPolicy::kModal ? p_left >= 0.5 : rng.bernoulli(p_left);
          }
          (left ? lefts : rights).push_back(static_cast<int>(i));
        }
        for (int i : lefts) arrangement.push_back(s.deprels[deps[i] - 1]);
        arrangement.push_back(OrderModel::kHeadMarker);
        for (int i : rights) arrangement.push_back(s.deprels[deps[i] - 1]);
      }
    } else {
      // non-reorderable head keeps its original arrangement
      bool placed = false;
      for (int d : deps) {
        if (!placed && d > node) {
          arrangement.push_back(OrderModel::kHeadMarker);
          placed = true;
        }
        arrangement.push_back(s.deprels[d - 1]);
      }
      if (!placed) arrangement.push_back(OrderModel::kHeadMarker);
    }

    // map arrangement labels back to dependant blocks; repeated relations
    // are consumed in original left-to-right order
    std::vector<bool> used(deps.size(), false);
    std::vector<int> out;
    for (const std::string& label : arrangement) {
      if (label == OrderModel::kHeadMarker) {
        out.push_back(node);
        continue;
      }
      bool matched = false;
      for (size_t i = 0; i < deps.size(); ++i) {
        if (used[i] || s.deprels[deps[i] - 1] != label) continue;
        used[i] = true;
        out.insert(out.end(), blocks[i].begin(), blocks[i].end());
        matched = true;
        break;
      }
      if (!matched)
        throw std::logic_error("reorder_sentence: arrangement does not match multiset");
    }
    return out;
  };

  int root = 0;
  for (int i = 1; i <= s.size(); ++i)
    if (s.heads[i - 1] == 0) root = i;
  std::vector<int> order = linearize(root);

  std::vector<int> new_pos(s.size() + 1, 0);  // old 1-based -> new 1-based
  for (size_t i = 0; i < order.size(); ++i) new_pos[order[i]] = static_cast<int>(i) + 1;

  DepSentence r;
  r.tokens.resize(s.size());
  r.heads.resize(s.size());
  r.deprels.resize(s.size());
  r.upos.resize(s.size());
  for (int old = 1; old <= s.size(); ++old) {
    int now = new_pos[old];
    r.tokens[now - 1] = s.tokens[old - 1];
    r.deprels[now - 1] = s.deprels[old - 1];
    r.upos[now - 1] = s.upos[old - 1];
    int h = s.heads[old - 1];
    r.heads[now - 1] = h == 0 ? 0 : new_pos[h];
  }
  return r;
}

}  // namespace poslab
