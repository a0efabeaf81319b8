#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace poslab {

// Byte-pair encoding over whitespace-pre-tokenized text. Words carry an
// end-of-word marker symbol so detokenization is well defined; the
// vocabulary is the base character inventory plus one symbol per merge.
struct BpeModel {
  static constexpr const char* kEndOfWord = "</w>";

  std::vector<std::pair<std::string, std::string>> merges;
  std::vector<std::string> base_symbols;  // sorted, includes the end marker
  int vocab_target = 0;

  int vocab_size() const {
    return static_cast<int>(base_symbols.size() + merges.size());
  }

  // symbol -> id in [0, vocab_size): base symbols first (sorted), then
  // merge outputs in merge order.
  std::map<std::string, int> symbol_ids() const {
    std::map<std::string, int> ids;
    for (size_t i = 0; i < base_symbols.size(); ++i)
      ids[base_symbols[i]] = static_cast<int>(i);
    for (size_t i = 0; i < merges.size(); ++i) {
      std::string sym = merges[i].first + merges[i].second;
      if (!ids.count(sym)) ids[sym] = static_cast<int>(base_symbols.size() + i);
    }
    return ids;
  }
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> words;
  std::istringstream is(line);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

inline std::vector<std::string> word_to_symbols(const std::string& w) {
  std::vector<std::string> syms;
  for (char c : w) syms.emplace_back(1, c);
  syms.push_back(BpeModel::kEndOfWord);
  return syms;
}

inline void count_word_pairs(const std::vector<std::string>& syms, long count,
                             std::map<std::pair<std::string, std::string>, long>& into) {
  for (size_t i = 0; i + 1 < syms.size(); ++i)
    into[{syms[i], syms[i + 1]}] += count;
}

inline bool merge_in_place(std::vector<std::string>& syms,
                           const std::pair<std::string, std::string>& pair) {
  bool changed = false;
  size_t w = 0;
  for (size_t r = 0; r < syms.size();) {
    if (r + 1 < syms.size() && syms[r] == pair.first && syms[r + 1] == pair.second) {
      syms[w++] = pair.first + pair.second;
      r += 2;
      changed = true;
    } else {
      if (w != r) syms[w] = std::move(syms[r]);
      ++w;
      ++r;
    }
  }
  syms.resize(w);
  return changed;
}

}  // namespace detail

// Greedy highest-frequency pair merging until the vocabulary reaches
// `vocab_size` symbols or no pair occurs twice. Ties break on the
// lexicographically smallest pair so learning is deterministic.
inline BpeModel learn_bpe(const std::vector<std::string>& lines, int vocab_size) {
  std::map<std::string, long> word_counts;
  for (const std::string& line : lines)
    for (const std::string& w : detail::split_ws(line)) word_counts[w]++;
  if (word_counts.empty()) throw std::invalid_argument("learn_bpe: empty corpus");

  std::vector<std::vector<std::string>> words;
  std::vector<long> counts;
  for (const auto& [w, c] : word_counts) {
    words.push_back(detail::word_to_symbols(w));
    counts.push_back(c);
  }

  BpeModel model;
  model.vocab_target = vocab_size;
  {
    std::map<std::string, bool> seen;
    for (const auto& syms : words)
      for (const auto& s : syms) seen[s] = true;
    for (const auto& [s, _] : seen) model.base_symbols.push_back(s);
  }
  if (vocab_size < static_cast<int>(model.base_symbols.size()))
    throw std::invalid_argument("learn_bpe: vocab_size " + std::to_string(vocab_size) +
                                " smaller than base inventory of " +
                                std::to_string(model.base_symbols.size()));

  std::map<std::pair<std::string, std::string>, long> pair_counts;
  for (size_t i = 0; i < words.size(); ++i)
    detail::count_word_pairs(words[i], counts[i], pair_counts);

  while (model.vocab_size() < vocab_size) {
    const std::pair<std::string, std::string>* best = nullptr;
    long best_count = 1;  // a pair must repeat to be worth merging
    for (const auto& [pair, count] : pair_counts)
      if (count > best_count) {
        best = &pair;
        best_count = count;
      }
    if (!best) break;
    std::pair<std::string, std::string> merge = *best;
    for (size_t i = 0; i < words.size(); ++i) {
      bool touches = false;
      for (size_t j = 0; j + 1 < words[i].size(); ++j)
        if (words[i][j] == merge.first && words[i][j + 1] == merge.second) {
          touches = true;
          break;
        }
      if (!touches) continue;
      std::map<std::pair<std::string, std::string>, long> before, after;
      detail::count_word_pairs(words[i], counts[i], before);
      detail::merge_in_place(words[i], merge);
      detail::count_word_pairs(words[i], counts[i], after);
      for (const auto& [p, c] : before) {
        auto it = pair_counts.find(p);
        it->second -= c;
        if (it->second <= 0) pair_counts.erase(it);
      }
      for (const auto& [p, c] : after) pair_counts[p] += c;
    }
    model.merges.push_back(std::move(merge));
  }
  return model;
}

// Splits one word into model symbols by replaying the merge list in order.
inline std::vector<std::string> apply_bpe(const BpeModel& model, const std::string& word) {
  std::vector<std::string> syms = detail::word_to_symbols(word);
  for (const auto& merge : model.merges) {
    if (syms.size() < 2) break;
    detail::merge_in_place(syms, merge);
  }
  return syms;
}

// Local subword ids for a line; unknown symbols (characters never seen in
// training) come out as -1 for the caller to map to its UNK token.
inline std::vector<int> bpe_encode_line(const BpeModel& model,
                                        const std::map<std::string, int>& ids,
                                        const std::string& line) {
  std::vector<int> out;
  for (const std::string& w : detail::split_ws(line))
    for (const std::string& s : apply_bpe(model, w)) {
      auto it = ids.find(s);
      out.push_back(it == ids.end() ? -1 : it->second);
    }
  return out;
}

// Inverse of encoding, modulo whitespace normalization: symbols are
// concatenated and end-of-word markers become single spaces.
inline std::string bpe_decode(const BpeModel& model, const std::vector<std::string>& syms) {
  (void)model;
  std::string text;
  for (const std::string& s : syms) {
    if (s.size() >= 4 && s.compare(s.size() - 4, 4, BpeModel::kEndOfWord) == 0) {
      text += s.substr(0, s.size() - 4);
      text += ' ';
    } else {
      text += s;
    }
  }
  while (!text.empty() && text.back() == ' ') text.pop_back();
  return text;
}

inline void save_bpe(const std::string& path, const BpeModel& model) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_bpe: cannot open " + path);
  os << "#bpe v1 target=" << model.vocab_target << "\n";
  os << "#base " << model.base_symbols.size() << "\n";
  for (const auto& s : model.base_symbols) os << s << "\n";
  os << "#merges " << model.merges.size() << "\n";
  for (const auto& [a, b] : model.merges) os << a << " " << b << "\n";
}

inline BpeModel load_bpe(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_bpe: cannot open " + path);
  BpeModel m;
  std::string line;
  std::getline(is, line);
  if (line.rfind("#bpe v1", 0) != 0) throw std::runtime_error("load_bpe: bad header");
  size_t eq = line.find("target=");
  m.vocab_target = std::stoi(line.substr(eq + 7));
  std::getline(is, line);
  int nbase = std::stoi(line.substr(6));
  for (int i = 0; i < nbase; ++i) {
    std::getline(is, line);
    m.base_symbols.push_back(line);
  }
  std::getline(is, line);
  int nmerges = std::stoi(line.substr(8));
  for (int i = 0; i < nmerges; ++i) {
    std::getline(is, line);
    size_t sp = line.find(' ');
    m.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return m;
}

}  // namespace poslab
