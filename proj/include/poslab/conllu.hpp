#pragma once

#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace poslab {

// One dependency-parsed sentence. Heads are 1-based token indices with 0
// marking the root.
struct DepSentence {
  std::vector<std::string> tokens;
  std::vector<int> heads;
  std::vector<std::string> deprels;
  std::vector<std::string> upos;

  int size() const { return static_cast<int>(tokens.size()); }

  bool is_valid_tree(std::string* why = nullptr) const {
    const int n = size();
    if (n == 0) {
      if (why) *why = "empty sentence";
      return false;
    }
    if (heads.size() != tokens.size() || deprels.size() != tokens.size() ||
        upos.size() != tokens.size()) {
      if (why) *why = "field length mismatch";
      return false;
    }
    int roots = 0;
    for (int i = 0; i < n; ++i) {
      if (heads[i] < 0 || heads[i] > n) {
        if (why) *why = "head index out of range";
        return false;
      }
      if (heads[i] == 0) ++roots;
    }
    if (roots != 1) {
      if (why) *why = roots == 0 ? "no root" : "multiple roots";
      return false;
    }
    // acyclicity: every node must reach the root by following heads
    for (int i = 0; i < n; ++i) {
      int cur = i + 1, steps = 0;
      while (cur != 0) {
        cur = heads[cur - 1];
        if (++steps > n) {
          if (why) *why = "cycle";
          return false;
        }
      }
    }
    return true;
  }

  std::string text() const {
    std::string s;
    for (int i = 0; i < size(); ++i) {
      if (i) s += ' ';
      s += tokens[i];
    }
    return s;
  }
};

// True iff no token between a head and its dependant falls outside the
// head's subtree — the classical no-crossing-arcs condition. Requires a
// valid tree.
inline bool is_projective(const DepSentence& s) {
  const int n = s.size();
  auto is_descendant_of = [&](int node, int anc) {
    int cur = node, steps = 0;
    while (cur != 0) {
      if (cur == anc) return true;
      cur = s.heads[cur - 1];
      if (++steps > n) throw std::runtime_error("is_projective: cyclic input");
    }
    return false;
  };
  for (int d = 1; d <= n; ++d) {
    int h = s.heads[d - 1];
    if (h == 0) continue;
    int lo = std::min(h, d), hi = std::max(h, d);
    for (int k = lo + 1; k < hi; ++k)
      if (!is_descendant_of(k, h)) return false;
  }
  return true;
}

struct IngestStats {
  int read = 0;
  std::vector<int> rejected;  // 0-based indices of malformed sentence blocks
};

// CoNLL-U reader. Multiword-token ranges and empty nodes are skipped;
// sentences whose head structure is not a single-rooted tree are rejected
// with their block index recorded.
inline std::vector<DepSentence> ingest_conllu(std::istream& in, IngestStats* stats = nullptr) {
  std::vector<DepSentence> out;
  DepSentence cur;
  int block = 0;
  IngestStats local;
  IngestStats& st = stats ? *stats : local;

  auto flush = [&]() {
    if (cur.size() == 0) return;
    ++st.read;
    std::string why;
    if (cur.is_valid_tree(&why)) out.push_back(std::move(cur));
    else st.rejected.push_back(block);
    cur = DepSentence();
    ++block;
  };

  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    if (line[0] == '#') continue;
    std::vector<std::string> cols;
    {
      size_t at = 0;
      while (at <= line.size()) {
        size_t tab = line.find('\t', at);
        if (tab == std::string::npos) {
          cols.push_back(line.substr(at));
          break;
        }
        cols.push_back(line.substr(at, tab - at));
        at = tab + 1;
      }
    }
    if (cols.size() < 8) continue;
    const std::string& id = cols[0];
    if (id.find('-') != std::string::npos || id.find('.') != std::string::npos)
      continue;  // multiword token / empty node
    cur.tokens.push_back(cols[1]);
    cur.upos.push_back(cols[3]);
    int head = -1;
    try {
      head = std::stoi(cols[6]);
    } catch (...) {
      head = -1;
    }
    cur.heads.push_back(head);
    cur.deprels.push_back(cols[7]);
  }
  flush();
  return out;
}

inline std::vector<DepSentence> ingest_conllu_string(const std::string& text,
                                                     IngestStats* stats = nullptr) {
  std::istringstream is(text);
  return ingest_conllu(is, stats);
}

inline void write_conllu(std::ostream& os, const std::vector<DepSentence>& sentences) {
  for (size_t si = 0; si < sentences.size(); ++si) {
    const DepSentence& s = sentences[si];
    os << "# sent_id = " << (si + 1) << "\n";
    os << "# text = " << s.text() << "\n";
    for (int i = 0; i < s.size(); ++i) {
      os << (i + 1) << '\t' << s.tokens[i] << "\t_\t" << s.upos[i] << "\t_\t_\t"
         << s.heads[i] << '\t' << s.deprels[i] << "\t_\t_\n";
    }
    os << "\n";
  }
}

}  // namespace poslab
