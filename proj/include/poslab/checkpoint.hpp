#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "poslab/encoder.hpp"
#include "poslab/trainer.hpp"

namespace poslab {

using json = nlohmann::json;

// --------------------------------------------------------------------------
// Named-matrix archive: "PMAR", u32 version, u32 entry count, then per
// entry a u32 name length, the name bytes, and a PMAT matrix blob.
// --------------------------------------------------------------------------

inline void write_archive(std::ostream& os,
                          const std::vector<std::pair<std::string, const Matrix*>>& entries) {
  os.write("PMAR", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, m] : entries) {
    detail::put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_matrix(os, *m);
  }
  if (!os) throw std::runtime_error("write_archive: write failed");
}

inline std::map<std::string, Matrix> read_archive(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PMAR", 4) != 0)
    throw std::runtime_error("read_archive: bad magic");
  if (detail::get_u32(is) != 1) throw std::runtime_error("read_archive: unsupported version");
  uint32_t count = detail::get_u32(is);
  std::map<std::string, Matrix> out;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = detail::get_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw std::runtime_error("read_archive: truncated entry name");
    out.emplace(std::move(name), read_matrix(is));
  }
  return out;
}

// --------------------------------------------------------------------------
// Config <-> JSON
// --------------------------------------------------------------------------

inline json posenc_spec_to_json(const PosEncSpec& s) {
  return json{{"kind", posenc_kind_name(s.kind)},
              {"d_model", s.d_model},
              {"max_positions", s.max_positions},
              {"num_buckets", s.num_buckets},
              {"untie_cls", s.untie_cls}};
}

inline PosEncSpec posenc_spec_from_json(const json& j) {
  PosEncSpec s;
  s.kind = posenc_kind_from_name(j.at("kind").get<std::string>());
  s.d_model = j.at("d_model").get<int>();
  s.max_positions = j.at("max_positions").get<int>();
  s.num_buckets = j.value("num_buckets", 32);
  s.untie_cls = j.value("untie_cls", true);
  s.validate();
  return s;
}

inline json encoder_config_to_json(const EncoderConfig& c) {
  return json{{"layers", c.layers},
              {"heads", c.heads},
              {"d_model", c.d_model},
              {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"dropout", c.dropout},
              {"posenc", posenc_spec_to_json(c.posenc)},
              {"ablation", c.ablation.tag()}};
}

inline EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.dropout = j.value("dropout", 0.1);
  c.posenc = posenc_spec_from_json(j.at("posenc"));
  c.ablation = AblationFlags::from_tag(j.value("ablation", "none"));
  c.validate();
  return c;
}

// --------------------------------------------------------------------------
// Checkpoint: manifest.json (config, seed, epoch, metrics) next to
// params.bin, a PMAR archive with one named entry per parameter plus the
// optimizer state when present.
// --------------------------------------------------------------------------

inline void save_checkpoint(const std::string& dir, EncoderModel& model, uint64_t seed,
                            int epoch, const json& metrics, const AdamState* adam = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  json manifest;
  manifest["config"] = encoder_config_to_json(model.config);
  manifest["seed"] = seed;
  manifest["epoch"] = epoch;
  manifest["metrics"] = metrics;
  manifest["has_optimizer_state"] = adam != nullptr;
  if (adam) manifest["adam_step"] = adam->step;
  {
    std::ofstream os(dir + "/manifest.json");
    if (!os) throw std::runtime_error("save_checkpoint: cannot open manifest in " + dir);
    os << manifest.dump(2) << "\n";
  }

  std::vector<std::pair<std::string, const Matrix*>> entries;
  model.visit_params([&](const std::string& name, Matrix& m) {
    entries.emplace_back(name, &m);
  });
  std::vector<Matrix> adam_copies;  // keep alive until written
  if (adam) {
    size_t k = 0;
    model.visit_params([&](const std::string& name, Matrix&) {
      entries.emplace_back("adam.m." + name, &adam->m[k]);
      entries.emplace_back("adam.v." + name, &adam->v[k]);
      ++k;
    });
  }
  std::ofstream os(dir + "/params.bin", std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open params in " + dir);
  write_archive(os, entries);
}

struct Checkpoint {
  EncoderModel model;
  AdamState adam;
  bool has_adam = false;
  uint64_t seed = 0;
  int epoch = 0;
  json metrics;
};

inline bool checkpoint_exists(const std::string& dir) {
  namespace fs = std::filesystem;
  return fs::exists(dir + "/manifest.json") && fs::exists(dir + "/params.bin");
}

inline Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream ms(dir + "/manifest.json");
  if (!ms) throw std::runtime_error("load_checkpoint: cannot open manifest in " + dir);
  json manifest = json::parse(ms);

  Checkpoint ck;
  ck.seed = manifest.at("seed").get<uint64_t>();
  ck.epoch = manifest.at("epoch").get<int>();
  ck.metrics = manifest.value("metrics", json::object());
  EncoderConfig cfg = encoder_config_from_json(manifest.at("config"));
  ck.model = EncoderModel::init(cfg, ck.seed);

  std::ifstream ps(dir + "/params.bin", std::ios::binary);
  if (!ps) throw std::runtime_error("load_checkpoint: cannot open params in " + dir);
  std::map<std::string, Matrix> blobs = read_archive(ps);

  ck.model.visit_params([&](const std::string& name, Matrix& m) {
    auto it = blobs.find(name);
    if (it == blobs.end())
      throw std::runtime_error("load_checkpoint: missing parameter " + name);
    if (it->second.rows != m.rows || it->second.cols != m.cols)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    m = it->second;
  });

  ck.has_adam = manifest.value("has_optimizer_state", false);
  if (ck.has_adam) {
    ck.adam.step = manifest.at("adam_step").get<long>();
    ck.model.visit_params([&](const std::string& name, Matrix& m) {
      auto mit = blobs.find("adam.m." + name);
      auto vit = blobs.find("adam.v." + name);
      if (mit == blobs.end() || vit == blobs.end())
        throw std::runtime_error("load_checkpoint: missing optimizer state for " + name);
      (void)m;
      ck.adam.m.push_back(mit->second);
      ck.adam.v.push_back(vit->second);
    });
  }
  return ck;
}

}  // namespace poslab
