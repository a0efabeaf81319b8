#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "poslab/analysis.hpp"
#include "poslab/bpe.hpp"
#include "poslab/checkpoint.hpp"
#include "poslab/conllu.hpp"
#include "poslab/corpus.hpp"
#include "poslab/multieval.hpp"
#include "poslab/order_model.hpp"
#include "poslab/trainer.hpp"

namespace poslab {

namespace fs = std::filesystem;

// --------------------------------------------------------------------------
// Experiment configuration: one JSON file describing the corpus inputs and
// the (language x encoding x seed) grid, plus ablation and monolingual
// control cells.
// --------------------------------------------------------------------------

struct ExperimentConfig {
  std::string name = "experiment";
  std::string output_dir = "out";

  // corpus inputs
  std::string train_conllu, valid_conllu;
  std::map<std::string, std::string> treebanks;  // language tag -> conllu path
  int bpe_vocab = 2048;
  uint64_t corpus_seed = 1;

  // grid
  std::vector<std::string> languages = {"en"};  // "en" = copy mode
  std::vector<std::string> encodings = {"sinusoidal", "absolute", "tupe_absolute",
                                        "tupe_relative", "relative_key",
                                        "relative_key_query"};
  std::vector<uint64_t> seeds = {0, 42, 100};
  std::vector<std::string> ablations;       // absolute-kind cells on languages[0]
  std::vector<std::string> mono_encodings;  // L1-only control cells on languages[0]

  // encoder overrides
  int layers = 12, heads = 1, d_model = 64, d_ff = 256;
  int max_seq_len = 128, max_positions = 512, tupe_max_positions = 128, num_buckets = 32;
  bool untie_cls = true;
  double dropout = 0.1;

  TrainConfig train;
  int eval_layer_lo = 0, eval_layer_hi = 8;

  // analysis settings
  int analysis_max_offset = 32;
  int analysis_runs = 125;
  int analysis_positions = 0;  // 0 = model max_seq_len
  std::vector<int> analysis_dims = {0, 4, 8, 16};
  int analysis_vocab_sample = 64;
  uint64_t analysis_seed = 777;

  static ExperimentConfig from_json(const json& j);
  json to_json() const;
  uint64_t config_hash() const;

  void validate() const {
    if (languages.empty() || encodings.empty() || seeds.empty())
      throw std::invalid_argument("config: grid is empty");
    for (const auto& lang : languages)
      if (lang != "en" && !treebanks.count(lang))
        throw std::invalid_argument("config: language " + lang + " has no treebank");
    train.validate();
  }
};

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  c.name = j.value("name", c.name);
  c.output_dir = j.value("output_dir", c.output_dir);
  if (j.contains("corpus")) {
    const json& jc = j.at("corpus");
    c.train_conllu = jc.value("train_conllu", "");
    c.valid_conllu = jc.value("valid_conllu", "");
    c.bpe_vocab = jc.value("bpe_vocab", c.bpe_vocab);
    c.corpus_seed = jc.value("seed", c.corpus_seed);
    if (jc.contains("treebanks"))
      for (const auto& [tag, path] : jc.at("treebanks").items())
        c.treebanks[tag] = path.get<std::string>();
  }
  if (j.contains("languages")) c.languages = j.at("languages").get<std::vector<std::string>>();
  if (j.contains("encodings")) c.encodings = j.at("encodings").get<std::vector<std::string>>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  if (j.contains("ablations")) c.ablations = j.at("ablations").get<std::vector<std::string>>();
  if (j.contains("mono_encodings"))
    c.mono_encodings = j.at("mono_encodings").get<std::vector<std::string>>();
  if (j.contains("encoder")) {
    const json& je = j.at("encoder");
    c.layers = je.value("layers", c.layers);
    c.heads = je.value("heads", c.heads);
    c.d_model = je.value("d_model", c.d_model);
    c.d_ff = je.value("d_ff", c.d_ff);
    c.max_seq_len = je.value("max_seq_len", c.max_seq_len);
    c.max_positions = je.value("max_positions", c.max_positions);
    c.tupe_max_positions = je.value("tupe_max_positions", c.tupe_max_positions);
    c.num_buckets = je.value("num_buckets", c.num_buckets);
    c.untie_cls = je.value("untie_cls", c.untie_cls);
    c.dropout = je.value("dropout", c.dropout);
  }
  if (j.contains("train")) {
    const json& jt = j.at("train");
    c.train.epochs = jt.value("epochs", c.train.epochs);
    c.train.batch_size = jt.value("batch_size", c.train.batch_size);
    c.train.lr = jt.value("lr", c.train.lr);
    c.train.beta1 = jt.value("beta1", c.train.beta1);
    c.train.beta2 = jt.value("beta2", c.train.beta2);
    c.train.adam_eps = jt.value("adam_eps", c.train.adam_eps);
    c.train.mask_ratio = jt.value("mask_ratio", c.train.mask_ratio);
    c.train.mask_to_mask = jt.value("mask_to_mask", c.train.mask_to_mask);
    c.train.mask_to_random = jt.value("mask_to_random", c.train.mask_to_random);
    c.train.grad_clip = jt.value("grad_clip", c.train.grad_clip);
    c.train.checkpoint_every = jt.value("checkpoint_every", c.train.checkpoint_every);
    c.train.val_mask_seed = jt.value("val_mask_seed", c.train.val_mask_seed);
  }
  if (j.contains("eval")) {
    const json& je = j.at("eval");
    if (je.contains("layers")) {
      auto layers = je.at("layers").get<std::vector<int>>();
      if (layers.size() != 2) throw std::invalid_argument("config: eval.layers must hold 2 entries");
      c.eval_layer_lo = layers[0];
      c.eval_layer_hi = layers[1];
    }
  }
  if (j.contains("analysis")) {
    const json& ja = j.at("analysis");
    c.analysis_max_offset = ja.value("max_offset", c.analysis_max_offset);
    c.analysis_runs = ja.value("runs", c.analysis_runs);
    c.analysis_positions = ja.value("positions", c.analysis_positions);
    if (ja.contains("dims")) c.analysis_dims = ja.at("dims").get<std::vector<int>>();
    c.analysis_vocab_sample = ja.value("vocab_sample", c.analysis_vocab_sample);
    c.analysis_seed = ja.value("seed", c.analysis_seed);
  }
  c.validate();
  return c;
}

inline json ExperimentConfig::to_json() const {
  json j;
  j["name"] = name;
  j["output_dir"] = output_dir;
  j["corpus"] = {{"train_conllu", train_conllu}, {"valid_conllu", valid_conllu},
                 {"bpe_vocab", bpe_vocab},       {"seed", corpus_seed},
                 {"treebanks", treebanks}};
  j["languages"] = languages;
  j["encodings"] = encodings;
  j["seeds"] = seeds;
  j["ablations"] = ablations;
  j["mono_encodings"] = mono_encodings;
  j["encoder"] = {{"layers", layers},
                  {"heads", heads},
                  {"d_model", d_model},
                  {"d_ff", d_ff},
                  {"max_seq_len", max_seq_len},
                  {"max_positions", max_positions},
                  {"tupe_max_positions", tupe_max_positions},
                  {"num_buckets", num_buckets},
                  {"untie_cls", untie_cls},
                  {"dropout", dropout}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr", train.lr},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"adam_eps", train.adam_eps},
                {"mask_ratio", train.mask_ratio},
                {"mask_to_mask", train.mask_to_mask},
                {"mask_to_random", train.mask_to_random},
                {"grad_clip", train.grad_clip},
                {"checkpoint_every", train.checkpoint_every},
                {"val_mask_seed", train.val_mask_seed}};
  j["eval"] = {{"layers", std::vector<int>{eval_layer_lo, eval_layer_hi}}};
  j["analysis"] = {{"max_offset", analysis_max_offset}, {"runs", analysis_runs},
                   {"positions", analysis_positions},   {"dims", analysis_dims},
                   {"vocab_sample", analysis_vocab_sample}, {"seed", analysis_seed}};
  return j;
}

// FNV-1a over the canonical JSON serialization.
inline uint64_t ExperimentConfig::config_hash() const {
  std::string s = to_json().dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// --------------------------------------------------------------------------
// Grid cells
// --------------------------------------------------------------------------

struct Cell {
  std::string language;
  PosEncKind kind = PosEncKind::kSinusoidal;
  AblationFlags ablation;
  uint64_t seed = 0;
  bool mono = false;

  std::string key() const {
    std::string k = language + ":" + posenc_kind_name(kind);
    if (ablation.any()) k += "+" + ablation.tag();
    if (mono) k += ":mono";
    k += ":s" + std::to_string(seed);
    return k;
  }
  std::string dir_name() const {
    std::string k = key();
    for (char& c : k)
      if (c == ':') c = '_';
    return k;
  }
};

inline std::vector<Cell> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<Cell> cells;
  for (const auto& lang : cfg.languages)
    for (const auto& enc : cfg.encodings)
      for (uint64_t seed : cfg.seeds) {
        Cell c;
        c.language = lang;
        c.kind = posenc_kind_from_name(enc);
        c.seed = seed;
        cells.push_back(c);
      }
  for (const auto& tag : cfg.ablations)
    for (uint64_t seed : cfg.seeds) {
      Cell c;
      c.language = cfg.languages.front();
      c.kind = PosEncKind::kAbsolute;
      c.ablation = AblationFlags::from_tag(tag);
      c.seed = seed;
      cells.push_back(c);
    }
  for (const auto& enc : cfg.mono_encodings)
    for (uint64_t seed : cfg.seeds) {
      Cell c;
      c.language = cfg.languages.front();
      c.kind = posenc_kind_from_name(enc);
      c.seed = seed;
      c.mono = true;
      cells.push_back(c);
    }
  return cells;
}

inline std::vector<Cell> filter_cells(const std::vector<Cell>& cells,
                                      const std::vector<std::string>& patterns) {
  if (patterns.empty()) return cells;
  std::vector<Cell> out;
  for (const Cell& c : cells) {
    std::string key = c.key();
    for (const auto& p : patterns)
      if (key.find(p) != std::string::npos) {
        out.push_back(c);
        break;
      }
  }
  return out;
}

// --------------------------------------------------------------------------
// Paths and small helpers
// --------------------------------------------------------------------------

struct Paths {
  fs::path root;
  explicit Paths(const ExperimentConfig& cfg) : root(cfg.output_dir) {}
  fs::path corpus_dir(const std::string& lang) const { return root / "corpus" / lang; }
  fs::path bpe_file() const { return root / "corpus" / "bpe.txt"; }
  fs::path cell_dir(const Cell& c) const { return root / "cells" / c.dir_name(); }
  fs::path checkpoint_dir(const Cell& c) const { return cell_dir(c) / "checkpoint"; }
  fs::path log_csv(const Cell& c) const { return cell_dir(c) / "log.csv"; }
  fs::path eval_json(const Cell& c) const { return cell_dir(c) / "eval.json"; }
  fs::path analysis_dir() const { return root / "analysis"; }
};

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Corpus artifacts on disk per language: id files + manifest.
inline void save_corpus(const fs::path& dir, const PairedCorpus& pc, const json& extra) {
  fs::create_directories(dir);
  write_id_file((dir / "l1.ids").string(), pc.l1);
  write_id_file((dir / "l2.ids").string(), pc.l2);
  json manifest = extra;
  manifest["vocab_per_lang"] = pc.vocab_per_lang;
  manifest["language_tag"] = pc.language_tag;
  manifest["mode"] = pc.mode;
  manifest["seed"] = pc.seed;
  manifest["pairs"] = pc.pair_count();
  manifest["special_tokens"] = {{"[PAD]", kPad}, {"[UNK]", kUnk}, {"[CLS]", kCls},
                                {"[SEP]", kSep}, {"[MASK]", kMask}};
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << "\n";
}

inline PairedCorpus load_corpus(const fs::path& dir) {
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw std::runtime_error("load_corpus: missing manifest in " + dir.string());
  json manifest = json::parse(ms);
  PairedCorpus pc;
  pc.vocab_per_lang = manifest.at("vocab_per_lang").get<int>();
  pc.language_tag = manifest.at("language_tag").get<std::string>();
  pc.mode = manifest.at("mode").get<std::string>();
  pc.seed = manifest.at("seed").get<uint64_t>();
  pc.l1 = read_id_file((dir / "l1.ids").string());
  pc.l2 = read_id_file((dir / "l2.ids").string());
  return pc;
}

inline EncoderConfig encoder_config_for(const ExperimentConfig& cfg, const Cell& cell,
                                        int vocab_per_lang) {
  EncoderConfig ec;
  ec.layers = cfg.layers;
  ec.heads = cfg.heads;
  ec.d_model = cfg.d_model;
  ec.d_ff = cfg.d_ff;
  ec.vocab_size = kNumSpecials + 2 * vocab_per_lang;
  ec.max_seq_len = cfg.max_seq_len;
  ec.dropout = cfg.dropout;
  ec.posenc.kind = cell.kind;
  ec.posenc.d_model = cfg.d_model;
  ec.posenc.max_positions =
      cell.kind == PosEncKind::kTupeRelative ? cfg.tupe_max_positions : cfg.max_positions;
  ec.posenc.num_buckets = cfg.num_buckets;
  ec.posenc.untie_cls = cfg.untie_cls;
  ec.ablation = cell.ablation;
  ec.validate();
  return ec;
}

// --------------------------------------------------------------------------
// prepare: projectivity filtering, BPE, per-language paired corpora
// --------------------------------------------------------------------------

struct PrepareResult {
  int train_read = 0, train_kept = 0;
  int valid_read = 0, valid_kept = 0;
};

inline PrepareResult cmd_prepare(const ExperimentConfig& cfg, std::ostream& log = std::cerr) {
  cfg.validate();
  if (cfg.train_conllu.empty() || cfg.valid_conllu.empty())
    throw std::invalid_argument("prepare: corpus.train_conllu and corpus.valid_conllu required");
  for (const std::string& path : {cfg.train_conllu, cfg.valid_conllu})
    if (!fs::exists(path)) throw std::runtime_error("prepare: missing input " + path);
  for (const auto& [tag, path] : cfg.treebanks)
    if (!fs::exists(path)) throw std::runtime_error("prepare: missing treebank " + path);

  Paths paths(cfg);
  auto load_projective = [&](const std::string& path, int& read, int& kept) {
    std::ifstream is(path);
    IngestStats stats;
    std::vector<DepSentence> all = ingest_conllu(is, &stats);
    read = stats.read;
    std::vector<DepSentence> keep;
    for (auto& s : all)
      if (is_projective(s)) keep.push_back(std::move(s));
    kept = static_cast<int>(keep.size());
    return keep;
  };

  PrepareResult res;
  std::vector<DepSentence> train_sents =
      load_projective(cfg.train_conllu, res.train_read, res.train_kept);
  std::vector<DepSentence> valid_sents =
      load_projective(cfg.valid_conllu, res.valid_read, res.valid_kept);
  log << "prepare: train " << res.train_kept << "/" << res.train_read
      << " projective, valid " << res.valid_kept << "/" << res.valid_read << "\n";

  std::vector<std::string> train_lines;
  for (const auto& s : train_sents) train_lines.push_back(s.text());
  BpeModel bpe = learn_bpe(train_lines, cfg.bpe_vocab);
  fs::create_directories(paths.root / "corpus");
  save_bpe(paths.bpe_file().string(), bpe);

  std::string hash = hash_hex(cfg.config_hash());
  for (const auto& lang : cfg.languages) {
    CorpusMode mode = lang == "en" ? CorpusMode::kCopy : CorpusMode::kReorder;
    OrderModel order;
    json extra;
    extra["config_hash"] = hash;
    extra["bpe_file"] = paths.bpe_file().string();
    extra["projective_train"] = {{"kept", res.train_kept}, {"read", res.train_read}};
    extra["projective_valid"] = {{"kept", res.valid_kept}, {"read", res.valid_read}};
    if (mode == CorpusMode::kReorder) {
      std::ifstream ts(cfg.treebanks.at(lang));
      IngestStats tstats;
      std::vector<DepSentence> tb = ingest_conllu(ts, &tstats);
      order = collect_order_stats(tb);
      extra["treebank"] = cfg.treebanks.at(lang);
    }
    std::string tag = lang == "en" ? "en" : "en~" + lang;
    PairedCorpus train_pc =
        build_paired_corpus(train_sents, bpe, mode, mode == CorpusMode::kReorder ? &order : nullptr,
                            cfg.corpus_seed, tag);
    PairedCorpus valid_pc =
        build_paired_corpus(valid_sents, bpe, mode, mode == CorpusMode::kReorder ? &order : nullptr,
                            cfg.corpus_seed + 1, tag);
    extra["split"] = "train";
    save_corpus(paths.corpus_dir(lang) / "train", train_pc, extra);
    extra["split"] = "valid";
    save_corpus(paths.corpus_dir(lang) / "valid", valid_pc, extra);
    log << "prepare: " << tag << " train pairs " << train_pc.pair_count() << ", valid pairs "
        << valid_pc.pair_count() << "\n";
  }
  return res;
}

// --------------------------------------------------------------------------
// train: one checkpointed run per grid cell, resumable, parallel over cells
// --------------------------------------------------------------------------

struct CellOutcome {
  Cell cell;
  bool skipped = false;
  bool failed = false;
  std::string error;
};

inline void write_train_log(const fs::path& path, const std::vector<EpochLog>& log,
                            const std::string& hash, uint64_t seed) {
  std::ofstream os(path);
  os << "# config_hash=" << hash << " seed=" << seed << "\n";
  os << "epoch,train_loss,val_ppl_full,val_ppl_l1,wall_seconds\n";
  for (const EpochLog& e : log)
    os << e.epoch << "," << fmt_double(e.train_loss) << "," << fmt_double(e.val_ppl_full)
       << "," << fmt_double(e.val_ppl_l1) << "," << fmt_double(e.wall_seconds) << "\n";
}

inline std::vector<EpochLog> read_train_log(const fs::path& path) {
  std::vector<EpochLog> out;
  std::ifstream is(path);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("epoch,", 0) == 0) continue;
    EpochLog e;
    std::istringstream ls(line);
    char comma;
    ls >> e.epoch >> comma >> e.train_loss >> comma >> e.val_ppl_full >> comma >>
        e.val_ppl_l1 >> comma >> e.wall_seconds;
    out.push_back(e);
  }
  return out;
}

inline CellOutcome train_cell(const ExperimentConfig& cfg, const Cell& cell, bool resume,
                              std::ostream& log, std::mutex& log_mutex) {
  CellOutcome outcome;
  outcome.cell = cell;
  Paths paths(cfg);
  try {
    PairedCorpus train_pc = load_corpus(paths.corpus_dir(cell.language) / "train");
    PairedCorpus valid_pc = load_corpus(paths.corpus_dir(cell.language) / "valid");
    EncoderConfig ec = encoder_config_for(cfg, cell, train_pc.vocab_per_lang);

    fs::path ckdir = paths.checkpoint_dir(cell);
    EncoderModel model = EncoderModel::init(ec, cell.seed);
    AdamState adam;
    int start_epoch = 0;
    std::vector<EpochLog> history;

    if (resume && checkpoint_exists(ckdir.string())) {
      Checkpoint ck = load_checkpoint(ckdir.string());
      if (ck.epoch >= cfg.train.epochs) {
        std::lock_guard<std::mutex> lk(log_mutex);
        log << "train: " << cell.key() << " already complete (epoch " << ck.epoch << ")\n";
        outcome.skipped = true;
        return outcome;
      }
      model = std::move(ck.model);
      if (ck.has_adam) adam = std::move(ck.adam);
      start_epoch = ck.epoch;
      for (const EpochLog& e : read_train_log(paths.log_csv(cell)))
        if (e.epoch < start_epoch) history.push_back(e);
      std::lock_guard<std::mutex> lk(log_mutex);
      log << "train: " << cell.key() << " resuming from epoch " << start_epoch << "\n";
    }

    std::string hash = hash_hex(cfg.config_hash());
    fs::create_directories(ckdir);
    TrainHooks hooks;
    hooks.start_epoch = start_epoch;
    hooks.resume_state = &adam;
    hooks.l1_only = cell.mono;
    hooks.on_checkpoint = [&](int epochs_done, EncoderModel& m, const AdamState& st,
                              const std::vector<EpochLog>& run_log) {
      json metrics;
      metrics["last_train_loss"] = run_log.back().train_loss;
      metrics["last_val_ppl_full"] = run_log.back().val_ppl_full;
      metrics["config_hash"] = hash;
      metrics["cell"] = cell.key();
      metrics["mono"] = cell.mono;
      save_checkpoint(ckdir.string(), m, cell.seed, epochs_done, metrics, &st);
      std::vector<EpochLog> merged = history;
      merged.insert(merged.end(), run_log.begin(), run_log.end());
      write_train_log(paths.log_csv(cell), merged, hash, cell.seed);
    };

    std::vector<EpochLog> run_log = train(model, train_pc, &valid_pc, cfg.train, cell.seed, hooks);
    if (cfg.train.epochs == 0 || run_log.empty()) {
      // still record a completed checkpoint so downstream commands can run
      json metrics;
      metrics["config_hash"] = hash;
      metrics["cell"] = cell.key();
      metrics["mono"] = cell.mono;
      save_checkpoint(ckdir.string(), model, cell.seed, cfg.train.epochs, metrics, &adam);
      write_train_log(paths.log_csv(cell), history, hash, cell.seed);
    }
    std::lock_guard<std::mutex> lk(log_mutex);
    log << "train: " << cell.key() << " done\n";
  } catch (const std::exception& e) {
    outcome.failed = true;
    outcome.error = e.what();
    std::lock_guard<std::mutex> lk(log_mutex);
    log << "train: " << cell.key() << " FAILED: " << e.what() << "\n";
  }
  return outcome;
}

inline int cmd_train(const ExperimentConfig& cfg, const std::vector<std::string>& cell_filter,
                     int workers, bool resume, std::ostream& log = std::cerr) {
  cfg.validate();
  std::vector<Cell> cells = filter_cells(enumerate_cells(cfg), cell_filter);
  if (cells.empty()) {
    log << "train: no cells matched\n";
    return 0;
  }
  std::mutex log_mutex;
  std::atomic<size_t> next{0};
  std::atomic<int> failures{0};
  int nworkers = std::max(1, std::min<int>(workers, static_cast<int>(cells.size())));
  auto worker = [&]() {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      CellOutcome out = train_cell(cfg, cells[i], resume, log, log_mutex);
      if (out.failed) failures.fetch_add(1);
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < nworkers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failures > 0) log << "train: " << failures << " cell(s) failed\n";
  return failures;
}

// --------------------------------------------------------------------------
// eval: EvalReport per cell, results.csv + per-(language, encoding) aggregate
// --------------------------------------------------------------------------

inline json eval_report_to_json(const EvalReport& r, int layer_lo, int layer_hi) {
  json j;
  j["ppl_full"] = r.ppl_full;
  j["ppl_l1"] = r.ppl_l1;
  j["retrieval"] = {{std::to_string(layer_lo), r.retrieval.at(layer_lo)},
                    {std::to_string(layer_hi), r.retrieval.at(layer_hi)}};
  j["translation"] = {{std::to_string(layer_lo), r.translation.at(layer_lo)},
                      {std::to_string(layer_hi), r.translation.at(layer_hi)}};
  j["ml_score"] = r.ml_score;
  j["metadata"] = {{"model_id", r.model_id},
                   {"language_tag", r.language_tag},
                   {"seed", r.seed},
                   {"duplicate_sentences", r.duplicate_sentences},
                   {"excluded_types", r.excluded_types},
                   {"notes", r.notes},
                   {"layers", std::vector<int>{layer_lo, layer_hi}}};
  return j;
}

inline int cmd_eval(const ExperimentConfig& cfg, const std::vector<std::string>& cell_filter,
                    std::ostream& log = std::cerr) {
  cfg.validate();
  Paths paths(cfg);
  std::vector<Cell> cells = filter_cells(enumerate_cells(cfg), cell_filter);
  std::string hash = hash_hex(cfg.config_hash());

  struct Row {
    Cell cell;
    bool present = false;
    EvalReport report;
  };
  std::vector<Row> rows;
  int failures = 0;
  for (const Cell& cell : cells) {
    if (cell.mono) continue;  // controls have no bilingual eval
    Row row;
    row.cell = cell;
    fs::path ckdir = paths.checkpoint_dir(cell);
    if (!checkpoint_exists(ckdir.string())) {
      log << "eval: " << cell.key() << " checkpoint missing, row marked absent\n";
      rows.push_back(row);
      continue;
    }
    try {
      Checkpoint ck = load_checkpoint(ckdir.string());
      PairedCorpus valid_pc = load_corpus(paths.corpus_dir(cell.language) / "valid");
      EvalSettings settings;
      settings.layer_lo = cfg.eval_layer_lo;
      settings.layer_hi = cfg.eval_layer_hi;
      settings.ppl_seed = cfg.train.val_mask_seed;
      EvalReport r = evaluate(ck.model, valid_pc, settings, cfg.train);
      r.model_id = cell.key();
      r.seed = cell.seed;
      row.present = true;
      row.report = r;
      std::ofstream os(paths.eval_json(cell));
      json j = eval_report_to_json(r, cfg.eval_layer_lo, cfg.eval_layer_hi);
      j["config_hash"] = hash;
      os << j.dump(2) << "\n";
      log << "eval: " << cell.key() << " ml_score " << fmt_double(r.ml_score) << "\n";
    } catch (const std::exception& e) {
      ++failures;
      log << "eval: " << cell.key() << " FAILED: " << e.what() << "\n";
    }
    rows.push_back(row);
  }

  fs::create_directories(paths.root);
  {
    std::ofstream os(paths.root / "results.csv");
    os << "# config_hash=" << hash << "\n";
    os << "corpus,language,encoding,ablation,seed,status,ppl_full,ppl_l1,retr_lo,retr_hi,"
          "trans_lo,trans_hi,ml_score\n";
    for (const Row& row : rows) {
      const Cell& c = row.cell;
      os << cfg.name << "," << c.language << "," << posenc_kind_name(c.kind) << ","
         << c.ablation.tag() << "," << c.seed << ",";
      if (!row.present) {
        os << "absent,,,,,,,\n";
        continue;
      }
      const EvalReport& r = row.report;
      os << "ok," << fmt_double(r.ppl_full) << "," << fmt_double(r.ppl_l1) << ","
         << fmt_double(r.retrieval.at(cfg.eval_layer_lo)) << ","
         << fmt_double(r.retrieval.at(cfg.eval_layer_hi)) << ","
         << fmt_double(r.translation.at(cfg.eval_layer_lo)) << ","
         << fmt_double(r.translation.at(cfg.eval_layer_hi)) << "," << fmt_double(r.ml_score)
         << "\n";
    }
  }

  // mean/std per (language, encoding, ablation) across seeds; sample std,
  // zero for a single seed
  {
    std::map<std::string, std::vector<const EvalReport*>> groups;
    std::vector<std::string> order;
    for (const Row& row : rows) {
      if (!row.present) continue;
      std::string key = row.cell.language + "," + posenc_kind_name(row.cell.kind) + "," +
                        row.cell.ablation.tag();
      if (!groups.count(key)) order.push_back(key);
      groups[key].push_back(&row.report);
    }
    auto mean_std = [](const std::vector<double>& xs) {
      double mean = 0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double var = 0;
      if (xs.size() > 1) {
        for (double x : xs) var += (x - mean) * (x - mean);
        var /= static_cast<double>(xs.size() - 1);
      }
      return std::pair{mean, std::sqrt(var)};
    };
    std::ofstream os(paths.root / "results_agg.csv");
    os << "# config_hash=" << hash << "\n";
    os << "corpus,language,encoding,ablation,seeds,ppl_full_mean,ppl_full_std,ppl_l1_mean,"
          "ppl_l1_std,retr_lo_mean,retr_lo_std,retr_hi_mean,retr_hi_std,trans_lo_mean,"
          "trans_lo_std,trans_hi_mean,trans_hi_std,ml_mean,ml_std\n";
    for (const std::string& key : order) {
      const auto& reports = groups[key];
      auto col = [&](auto getter) {
        std::vector<double> xs;
        for (const EvalReport* r : reports) xs.push_back(getter(*r));
        return mean_std(xs);
      };
      auto [pf, pf_s] = col([](const EvalReport& r) { return r.ppl_full; });
      auto [pl, pl_s] = col([](const EvalReport& r) { return r.ppl_l1; });
      auto [rl, rl_s] = col([&](const EvalReport& r) { return r.retrieval.at(cfg.eval_layer_lo); });
      auto [rh, rh_s] = col([&](const EvalReport& r) { return r.retrieval.at(cfg.eval_layer_hi); });
      auto [tl, tl_s] = col([&](const EvalReport& r) { return r.translation.at(cfg.eval_layer_lo); });
      auto [th, th_s] = col([&](const EvalReport& r) { return r.translation.at(cfg.eval_layer_hi); });
      auto [ml, ml_s] = col([](const EvalReport& r) { return r.ml_score; });
      os << cfg.name << "," << key << "," << reports.size() << "," << fmt_double(pf) << ","
         << fmt_double(pf_s) << "," << fmt_double(pl) << "," << fmt_double(pl_s) << ","
         << fmt_double(rl) << "," << fmt_double(rl_s) << "," << fmt_double(rh) << ","
         << fmt_double(rh_s) << "," << fmt_double(tl) << "," << fmt_double(tl_s) << ","
         << fmt_double(th) << "," << fmt_double(th_s) << "," << fmt_double(ml) << ","
         << fmt_double(ml_s) << "\n";
    }
  }
  return failures;
}

// --------------------------------------------------------------------------
// analyze: figure-data CSVs (encoding dims, Procrustes losses + Wilcoxon,
// word-position correlations, ablation grid)
// --------------------------------------------------------------------------

inline int analysis_positions_for(const ExperimentConfig& cfg, const EncoderModel& model) {
  int positions = cfg.analysis_positions > 0 ? cfg.analysis_positions : cfg.max_seq_len;
  Matrix table = analysis_encoding_table(model);
  return std::min(positions, table.rows);
}

inline int cmd_analyze(const ExperimentConfig& cfg, const std::vector<std::string>& cell_filter,
                       std::ostream& log = std::cerr) {
  cfg.validate();
  Paths paths(cfg);
  fs::create_directories(paths.analysis_dir());
  std::vector<Cell> cells = filter_cells(enumerate_cells(cfg), cell_filter);
  std::string hash = hash_hex(cfg.config_hash());
  int failures = 0;

  struct Loaded {
    Cell cell;
    Checkpoint ck;
  };
  std::vector<Loaded> models;
  for (const Cell& cell : cells) {
    fs::path ckdir = paths.checkpoint_dir(cell);
    if (!checkpoint_exists(ckdir.string())) {
      log << "analyze: " << cell.key() << " checkpoint missing, skipped\n";
      continue;
    }
    try {
      models.push_back({cell, load_checkpoint(ckdir.string())});
    } catch (const std::exception& e) {
      ++failures;
      log << "analyze: " << cell.key() << " FAILED to load: " << e.what() << "\n";
    }
  }

  // Fig. 4 data: selected dimensions of each model's encoding table
  {
    std::ofstream os(paths.analysis_dir() / "fig4_encoding_dims.csv");
    os << "# config_hash=" << hash << "\n";
    os << "model,seed,position,dim,value\n";
    for (auto& m : models) {
      std::vector<int> dims;
      for (int d : cfg.analysis_dims)
        if (d < m.ck.model.config.d_model) dims.push_back(d);
      int positions = std::min(32, analysis_positions_for(cfg, m.ck.model));
      for (const EncodingDimPoint& pt : export_encoding_dims(m.ck.model, dims, positions))
        os << m.cell.key() << "," << m.cell.seed << "," << pt.position << "," << pt.dim << ","
           << fmt_double(pt.value) << "\n";
    }
  }

  // Fig. 5 data: per-offset Procrustes losses per model
  std::map<std::string, std::vector<double>> per_offset_medians;  // cell key -> medians 1..K
  {
    std::ofstream os(paths.analysis_dir() / "fig5_procrustes.csv");
    os << "# config_hash=" << hash << "\n";
    os << "model,seed,offset,mean_loss,median_loss,runs\n";
    for (auto& m : models) {
      Matrix table = analysis_encoding_table(m.ck.model);
      int positions = analysis_positions_for(cfg, m.ck.model);
      if (is_relative(m.ck.model.config.posenc.kind)) {
        int center = m.ck.model.config.posenc.max_positions - 1;
        int lo = std::max(0, center - positions / 2);
        table = table.slice_rows(lo, std::min(table.rows, lo + positions));
      } else {
        table = table.slice_rows(0, positions);
      }
      std::vector<double>& medians = per_offset_medians[m.cell.key()];
      for (int k = 1; k <= cfg.analysis_max_offset; ++k) {
        try {
          Rng rng(Rng::derive(cfg.analysis_seed, Rng::derive(m.cell.seed, k)));
          ProcrustesResult r = compositionality_loss(table, k, cfg.analysis_runs, rng);
          medians.push_back(r.median_loss);
          os << m.cell.key() << "," << m.cell.seed << "," << k << "," << fmt_double(r.mean_loss)
             << "," << fmt_double(r.median_loss) << "," << r.runs << "\n";
        } catch (const std::exception& e) {
          log << "analyze: " << m.cell.key() << " offset " << k << " skipped: " << e.what()
              << "\n";
          break;
        }
      }
    }
  }

  // Wilcoxon signed-rank over per-offset medians: absolute vs tupe_absolute
  // per (language, seed), matching the paper's comparison
  {
    std::ofstream os(paths.analysis_dir() / "fig5_wilcoxon.csv");
    os << "# config_hash=" << hash << "\n";
    os << "language,seed,model_a,model_b,n,w_plus,w_minus,p_two_sided,median_a,median_b\n";
    for (auto& a : models) {
      if (a.cell.kind != PosEncKind::kAbsolute || a.cell.ablation.any() || a.cell.mono) continue;
      for (auto& b : models) {
        if (b.cell.kind != PosEncKind::kTupeAbsolute || b.cell.mono) continue;
        if (a.cell.language != b.cell.language || a.cell.seed != b.cell.seed) continue;
        const auto& xa = per_offset_medians[a.cell.key()];
        const auto& xb = per_offset_medians[b.cell.key()];
        size_t n = std::min(xa.size(), xb.size());
        if (n < 2) continue;
        std::vector<double> va(xa.begin(), xa.begin() + n), vb(xb.begin(), xb.begin() + n);
        WilcoxonResult w = wilcoxon_signed_rank(va, vb);
        auto med = [](std::vector<double> v) {
          std::sort(v.begin(), v.end());
          return v.size() % 2 ? v[v.size() / 2]
                              : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
        };
        os << a.cell.language << "," << a.cell.seed << "," << a.cell.key() << ","
           << b.cell.key() << "," << w.n << "," << w.w_plus << "," << w.w_minus << ","
           << fmt_double(w.p_two_sided) << "," << fmt_double(med(va)) << ","
           << fmt_double(med(vb)) << "\n";
      }
    }
  }

  // Fig. 6 data: word-position correlation matrices (additive kinds only)
  {
    std::ofstream os(paths.analysis_dir() / "fig6_correlations.csv");
    os << "# config_hash=" << hash << "\n";
    os << "model,seed,direction,word_index,position,value,zvalue\n";
    for (auto& m : models) {
      if (!is_additive(m.ck.model.config.posenc.kind)) {
        log << "analyze: " << m.cell.key() << " fig6 skipped (no additive position table)\n";
        continue;
      }
      try {
        PairedCorpus train_pc = load_corpus(paths.corpus_dir(m.cell.language) / "train");
        std::vector<long> freq(m.ck.model.config.vocab_size, 0);
        for (const auto& seq : train_pc.l1)
          for (int id : seq)
            if (!is_special_id(id)) freq[id]++;
        std::vector<int> sample;
        for (int id = kNumSpecials; id < m.ck.model.config.vocab_size; ++id)
          if (freq[id] > 0) sample.push_back(id);
        std::stable_sort(sample.begin(), sample.end(),
                         [&](int x, int y) { return freq[x] > freq[y]; });
        if (static_cast<int>(sample.size()) > cfg.analysis_vocab_sample)
          sample.resize(cfg.analysis_vocab_sample);
        int positions = std::min(analysis_positions_for(cfg, m.ck.model), 32);
        auto [wq, pq] = word_position_correlation(m.ck.model, positions, sample);
        auto dump = [&](const char* dir, const Matrix& v) {
          Matrix z = zscore(v);
          for (int i = 0; i < v.rows; ++i)
            for (int j = 0; j < v.cols; ++j)
              os << m.cell.key() << "," << m.cell.seed << "," << dir << "," << i << "," << j
                 << "," << fmt_double(v.at(i, j)) << "," << fmt_double(z.at(i, j)) << "\n";
        };
        dump("word_query", wq.values);
        dump("position_query", pq.values);
      } catch (const std::exception& e) {
        ++failures;
        log << "analyze: " << m.cell.key() << " fig6 FAILED: " << e.what() << "\n";
      }
    }
  }

  // Fig. 7 data: ablation grid (perplexity, ML score, median Procrustes loss)
  {
    std::ofstream os(paths.analysis_dir() / "fig7_ablations.csv");
    os << "# config_hash=" << hash << "\n";
    os << "language,ablation,seed,ppl_full,ml_score,median_procrustes\n";
    for (auto& m : models) {
      if (m.ck.model.config.posenc.kind != PosEncKind::kAbsolute || m.cell.mono) continue;
      double ppl = -1, ml = -1;
      fs::path ej = paths.eval_json(m.cell);
      if (fs::exists(ej)) {
        std::ifstream is(ej);
        json j = json::parse(is);
        ppl = j.value("ppl_full", -1.0);
        ml = j.value("ml_score", -1.0);
      }
      const auto& medians = per_offset_medians[m.cell.key()];
      double med = -1;
      if (!medians.empty()) {
        std::vector<double> v = medians;
        std::sort(v.begin(), v.end());
        med = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
      }
      os << m.cell.language << "," << m.cell.ablation.tag() << "," << m.cell.seed << ","
         << (ppl < 0 ? "absent" : fmt_double(ppl)) << ","
         << (ml < 0 ? "absent" : fmt_double(ml)) << ","
         << (med < 0 ? "absent" : fmt_double(med)) << "\n";
    }
  }
  log << "analyze: wrote " << paths.analysis_dir().string() << "\n";
  return failures;
}

// --------------------------------------------------------------------------
// report: join eval aggregates with per-model Procrustes medians
// --------------------------------------------------------------------------

inline int cmd_report(const ExperimentConfig& cfg, std::ostream& log = std::cerr) {
  Paths paths(cfg);
  std::string hash = hash_hex(cfg.config_hash());
  fs::path agg = paths.root / "results_agg.csv";
  fs::path fig5 = paths.analysis_dir() / "fig5_procrustes.csv";
  if (!fs::exists(agg)) throw std::runtime_error("report: run eval first (missing results_agg.csv)");

  // median procrustes per (language, encoding) over offsets and seeds
  std::map<std::string, std::vector<double>> med_losses;
  if (fs::exists(fig5)) {
    std::ifstream is(fig5);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#' || line.rfind("model,", 0) == 0) continue;
      std::istringstream ls(line);
      std::string model, seed, offset, mean_loss, median_loss;
      std::getline(ls, model, ',');
      std::getline(ls, seed, ',');
      std::getline(ls, offset, ',');
      std::getline(ls, mean_loss, ',');
      std::getline(ls, median_loss, ',');
      // model key = language:encoding[+abl][:mono]:sN -> group by first two parts
      size_t p1 = model.find(':');
      size_t p2 = model.find(':', p1 + 1);
      std::string group = model.substr(0, p2);
      if (group.find(":mono") == std::string::npos && model.find(":mono") != std::string::npos)
        group += ":mono";
      med_losses[group].push_back(std::stod(median_loss));
    }
  }

  std::ofstream os(paths.root / "summary.csv");
  os << "# config_hash=" << hash << "\n";
  std::ifstream is(agg);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (first) {
      os << line << ",median_procrustes\n";
      first = false;
      continue;
    }
    std::istringstream ls(line);
    std::string corpus, language, encoding, ablation;
    std::getline(ls, corpus, ',');
    std::getline(ls, language, ',');
    std::getline(ls, encoding, ',');
    std::getline(ls, ablation, ',');
    std::string group = language + ":" + encoding + (ablation != "none" && !ablation.empty()
                                                         ? "+" + ablation
                                                         : "");
    auto it = med_losses.find(group);
    std::string med = "absent";
    if (it != med_losses.end() && !it->second.empty()) {
      std::vector<double> v = it->second;
      std::sort(v.begin(), v.end());
      med = fmt_double(v.size() % 2 ? v[v.size() / 2]
                                    : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]));
    }
    os << line << "," << med << "\n";
  }
  log << "report: wrote " << (paths.root / "summary.csv").string() << "\n";
  return 0;
}

}  // namespace poslab
