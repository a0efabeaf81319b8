#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "poslab/encoder.hpp"

using namespace poslab;
using poslab::testing::random_matrix;

namespace {

EncoderConfig tiny_config(PosEncKind kind, int layers = 2, int d = 8, int v = 8) {
  EncoderConfig cfg;
  cfg.layers = layers;
  cfg.heads = 1;
  cfg.d_model = d;
  cfg.d_ff = 2 * d;
  cfg.vocab_size = kNumSpecials + 2 * v;
  cfg.max_seq_len = 16;
  cfg.dropout = 0.0;
  cfg.posenc = PosEncSpec::make(kind, d);
  cfg.posenc.max_positions = kind == PosEncKind::kTupeRelative ? 32 : 16;
  cfg.posenc.num_buckets = 8;
  return cfg;
}

struct FixedBatch {
  std::vector<std::vector<int>> ids;
  std::vector<std::vector<int>> positions;
  std::vector<std::vector<int>> labels;
};

FixedBatch fixed_batch(int vocab) {
  FixedBatch b;
  b.ids = {{kCls, 6, 7, 8, 9, kSep}, {kCls, 10, 11, 12, kSep}};
  b.positions = {{1, 3}, {2}};
  b.labels = {{7, vocab - 1}, {6}};
  return b;
}

double encoder_loss(EncoderModel& model, const FixedBatch& batch,
                    std::vector<Matrix>* grads = nullptr) {
  Tape tape;
  ModelVars vars = record_model(tape, model);
  std::vector<Tape::VarId> rows;
  std::vector<int> labels;
  for (size_t s = 0; s < batch.ids.size(); ++s) {
    auto states = encode_states_on_tape(tape, model.config, vars, batch.ids[s]);
    rows.push_back(tape.gather_rows(states.back(), batch.positions[s]));
    for (int l : batch.labels[s]) labels.push_back(l);
  }
  Tape::VarId hidden = tape.concat_rows(rows);
  Tape::VarId logits = tape.add_rowvec(tape.matmul_nt(hidden, vars.tok_embed), vars.out_bias);
  Tape::VarId loss = tape.cross_entropy_mean(logits, labels);
  double value = tape.val(loss).data[0];
  if (grads) {
    tape.backward(loss);
    grads->clear();
    for (Tape::VarId leaf : vars.leaves) grads->push_back(tape.grad(leaf));
  }
  return value;
}

// Central finite differences over a random sample of coordinates of every
// parameter, compared against the tape gradient.
double encoder_gradcheck(EncoderModel& model, int coords_per_param = 4,
                         double step = 1e-5) {
  FixedBatch batch = fixed_batch(model.config.vocab_size);
  std::vector<Matrix> grads;
  encoder_loss(model, batch, &grads);

  Rng probe(1234);
  double worst = 0.0;
  size_t k = 0;
  model.visit_params([&](const std::string&, Matrix& p) {
    int n = static_cast<int>(p.size());
    for (int c = 0; c < coords_per_param; ++c) {
      int i = probe.uniform_int(0, n - 1);
      double saved = p.data[i];
      p.data[i] = saved + step;
      double up = encoder_loss(model, batch);
      p.data[i] = saved - step;
      double down = encoder_loss(model, batch);
      p.data[i] = saved;
      double fd = (up - down) / (2 * step);
      double an = grads[k].data[i];
      double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      worst = std::max(worst, rel);
    }
    ++k;
  });
  return worst;
}

}  // namespace

TEST_CASE("encoder config validation") {
  EncoderConfig cfg = tiny_config(PosEncKind::kSinusoidal);
  CHECK_NOTHROW(cfg.validate());

  EncoderConfig bad_heads = cfg;
  bad_heads.heads = 3;  // does not divide 8
  CHECK_THROWS(bad_heads.validate());

  EncoderConfig overlong = cfg;
  overlong.max_seq_len = 1000;
  CHECK_THROWS(overlong.validate());

  EncoderConfig ablated = tiny_config(PosEncKind::kTupeAbsolute);
  ablated.ablation.drop_position_position = true;
  CHECK_THROWS_WITH(ablated.validate(), Catch::Matchers::ContainsSubstring("absolute"));
}

TEST_CASE("layer 0 is the embedding-stage output per kind") {
  std::vector<int> ids = {kCls, 7, 9, kSep};
  SECTION("sinusoidal: 2*sqrt(d)*E + p") {
    EncoderModel m = EncoderModel::init(tiny_config(PosEncKind::kSinusoidal), 1);
    ForwardResult fr = forward(m, ids);
    double s = 2.0 * std::sqrt(8.0);
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < 8; ++j)
        CHECK(fr.states[0].at(static_cast<int>(i), j) ==
              Catch::Approx(s * m.tok_embed.at(ids[i], j) +
                            m.sin_table.at(static_cast<int>(i), j)).margin(1e-12));
  }
  SECTION("absolute: E + P") {
    EncoderModel m = EncoderModel::init(tiny_config(PosEncKind::kAbsolute), 1);
    ForwardResult fr = forward(m, ids);
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < 8; ++j)
        CHECK(fr.states[0].at(static_cast<int>(i), j) ==
              Catch::Approx(m.tok_embed.at(ids[i], j) +
                            m.pos.table.at(static_cast<int>(i), j)).margin(1e-12));
  }
  SECTION("untied and relative kinds: token embedding alone") {
    for (PosEncKind kind : {PosEncKind::kTupeAbsolute, PosEncKind::kTupeRelative,
                            PosEncKind::kRelativeKey, PosEncKind::kRelativeKeyQuery}) {
      EncoderModel m = EncoderModel::init(tiny_config(kind), 1);
      ForwardResult fr = forward(m, ids);
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < 8; ++j)
          CHECK(fr.states[0].at(static_cast<int>(i), j) == m.tok_embed.at(ids[i], j));
    }
  }
}

TEST_CASE("four-term decomposition equals the fused product") {
  EncoderModel m = EncoderModel::init(tiny_config(PosEncKind::kAbsolute), 3);
  const int len = 6, d = 8;
  Matrix w(len, d), p(len, d);
  Rng rng(5);
  for (double& v : w.data) v = rng.normal(0, 0.5);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < d; ++j) p.at(i, j) = m.pos.table.at(i, j);
  Matrix fused = add(w, p);

  Matrix decomposed = attention_logits(m, fused, &w, &p, 0);
  Matrix direct = scale(matmul_nt(matmul(fused, m.layers[0].wq), matmul(fused, m.layers[0].wk)),
                        1.0 / std::sqrt(8.0));
  CHECK(max_abs_diff(decomposed, direct) < 1e-9);
}

TEST_CASE("ablation flags") {
  SECTION("all flags off equals unablated computation") {
    EncoderConfig cfg = tiny_config(PosEncKind::kAbsolute);
    EncoderModel plain = EncoderModel::init(cfg, 9);
    EncoderConfig cfg_flags = cfg;  // no flags set; identical path
    EncoderModel same = EncoderModel::init(cfg_flags, 9);
    std::vector<int> ids = {kCls, 6, 8, 10, kSep};
    ForwardResult a = forward(plain, ids);
    ForwardResult b = forward(same, ids);
    CHECK(max_abs_diff(a.mlm_logits, b.mlm_logits) == 0.0);
  }
  SECTION("drop_position_position with zero embeddings kills all logits") {
    EncoderConfig cfg = tiny_config(PosEncKind::kAbsolute);
    cfg.ablation.drop_position_position = true;
    EncoderModel m = EncoderModel::init(cfg, 9);
    m.tok_embed = Matrix::zeros(cfg.vocab_size, cfg.d_model);
    const int len = 5;
    Matrix w = Matrix::zeros(len, cfg.d_model);
    Matrix p = m.pos.table.slice_rows(0, len);
    Matrix logits = attention_logits(m, add(w, p), &w, &p, 0);
    CHECK(frobenius_sq(logits) == 0.0);
  }
  SECTION("each dropped term vanishes from the sum") {
    EncoderConfig base = tiny_config(PosEncKind::kAbsolute);
    EncoderModel m = EncoderModel::init(base, 11);
    const int len = 4, d = 8;
    Rng rng(3);
    Matrix w = random_matrix(len, d, rng, 0.3);
    Matrix p = m.pos.table.slice_rows(0, len);
    Matrix fused = add(w, p);
    double inv = 1.0 / std::sqrt(8.0);
    Matrix wq = matmul(w, m.layers[0].wq), wk = matmul(w, m.layers[0].wk);
    Matrix pq = matmul(p, m.layers[0].wq), pk = matmul(p, m.layers[0].wk);
    Matrix ww = matmul_nt(wq, wk), wp = matmul_nt(wq, pk);
    Matrix pw = matmul_nt(pq, wk), pp = matmul_nt(pq, pk);

    auto with_flags = [&](bool dpp, bool dpw, bool dwp) {
      EncoderModel mm = EncoderModel::init(base, 11);
      mm.config.ablation.drop_position_position = dpp;
      mm.config.ablation.drop_position_word = dpw;
      mm.config.ablation.drop_word_position = dwp;
      return attention_logits(mm, fused, &w, &p, 0);
    };
    CHECK(max_abs_diff(with_flags(true, false, false),
                       scale(add(ww, add(wp, pw)), inv)) < 1e-10);
    CHECK(max_abs_diff(with_flags(false, true, false),
                       scale(add(ww, add(wp, pp)), inv)) < 1e-10);
    CHECK(max_abs_diff(with_flags(false, false, true),
                       scale(add(ww, add(pw, pp)), inv)) < 1e-10);
  }
  SECTION("untied parameters replace W with U in position-bearing terms") {
    EncoderConfig cfg = tiny_config(PosEncKind::kAbsolute);
    cfg.ablation.untie_word_position_params = true;
    EncoderModel m = EncoderModel::init(cfg, 13);
    REQUIRE(m.pos.uq.size() > 0);
    const int len = 4, d = 8;
    Rng rng(4);
    Matrix w = random_matrix(len, d, rng, 0.3);
    Matrix p = m.pos.table.slice_rows(0, len);
    Matrix logits = attention_logits(m, add(w, p), &w, &p, 0);
    Matrix wq = matmul(w, m.layers[0].wq), wk = matmul(w, m.layers[0].wk);
    Matrix pq = matmul(p, m.pos.uq), pk = matmul(p, m.pos.uk);
    Matrix expect = scale(add(add(matmul_nt(wq, wk), matmul_nt(wq, pk)),
                              add(matmul_nt(pq, wk), matmul_nt(pq, pk))),
                          1.0 / std::sqrt(8.0));
    CHECK(max_abs_diff(logits, expect) < 1e-10);
  }
}

TEST_CASE("relative key with zero table reduces to vanilla attention") {
  EncoderConfig cfg = tiny_config(PosEncKind::kRelativeKey);
  EncoderModel m = EncoderModel::init(cfg, 21);  // relative tables init to zero
  const int len = 5;
  Rng rng(8);
  Matrix x = random_matrix(len, cfg.d_model, rng, 0.4);
  Matrix logits = attention_logits(m, x, nullptr, nullptr, 0);
  Matrix vanilla = scale(matmul_nt(matmul(x, m.layers[0].wq), matmul(x, m.layers[0].wk)),
                         1.0 / std::sqrt(8.0));
  CHECK(max_abs_diff(logits, vanilla) < 1e-12);
}

TEST_CASE("pad positions never influence non-pad outputs") {
  for (PosEncKind kind : {PosEncKind::kSinusoidal, PosEncKind::kAbsolute,
                          PosEncKind::kTupeRelative, PosEncKind::kRelativeKey}) {
    EncoderModel m = EncoderModel::init(tiny_config(kind), 31);
    std::vector<int> base = {kCls, 6, 9, 12, kSep};
    std::vector<int> padded = base;
    padded.push_back(kPad);
    padded.push_back(kPad);

    ForwardResult clean = forward(m, base);
    ForwardResult with_pad = forward(m, padded);
    for (size_t layer = 0; layer < clean.states.size(); ++layer)
      for (size_t i = 0; i < base.size(); ++i)
        for (int j = 0; j < m.config.d_model; ++j)
          CHECK(clean.states[layer].at(static_cast<int>(i), j) ==
                Catch::Approx(with_pad.states[layer].at(static_cast<int>(i), j))
                    .margin(1e-12));

    // perturbing the pad embedding must not change non-pad outputs
    for (int j = 0; j < m.config.d_model; ++j) m.tok_embed.at(kPad, j) += 17.5;
    ForwardResult perturbed = forward(m, padded);
    for (size_t i = 0; i < base.size(); ++i)
      for (int j = 0; j < m.config.d_model; ++j)
        CHECK(with_pad.mlm_logits.at(static_cast<int>(i), j) ==
              Catch::Approx(perturbed.mlm_logits.at(static_cast<int>(i), j)).margin(1e-12));
  }
}

TEST_CASE("bare attention is order-equivariant with positional machinery zeroed") {
  EncoderConfig cfg = tiny_config(PosEncKind::kAbsolute);
  EncoderModel m = EncoderModel::init(cfg, 17);
  m.pos.table = Matrix::zeros(cfg.posenc.max_positions, cfg.d_model);

  std::vector<int> ids = {kCls, 6, 7, 8, 9, kSep};
  std::vector<int> swapped = {kCls, 8, 7, 6, 9, kSep};  // tokens 1 and 3 swapped
  ForwardResult a = forward(m, ids);
  ForwardResult b = forward(m, swapped);
  auto perm = [](int i) { return i == 1 ? 3 : i == 3 ? 1 : i; };
  for (size_t layer = 0; layer < a.states.size(); ++layer)
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < cfg.d_model; ++j)
        CHECK(a.states[layer].at(i, j) ==
              Catch::Approx(b.states[layer].at(perm(i), j)).margin(1e-10));
}

TEST_CASE("gradient check across kinds and ablations") {
  // 2-layer d=8 models; relative error vs central differences < 1e-3
  SECTION("six kinds") {
    for (PosEncKind kind : {PosEncKind::kSinusoidal, PosEncKind::kAbsolute,
                            PosEncKind::kTupeAbsolute, PosEncKind::kTupeRelative,
                            PosEncKind::kRelativeKey, PosEncKind::kRelativeKeyQuery}) {
      EncoderModel m = EncoderModel::init(tiny_config(kind), 101);
      if (is_relative(kind)) {
        Rng rng(55);  // exercise nonzero relative tables
        for (double& v : m.pos.table.data) v = rng.normal(0, 0.05);
      }
      double worst = encoder_gradcheck(m);
      INFO(posenc_kind_name(kind));
      CHECK(worst < 1e-3);
    }
  }
  SECTION("five ablation settings on the absolute kind") {
    const char* tags[] = {"none", "drop_pp", "drop_pw", "drop_wp", "untie_params"};
    for (const char* tag : tags) {
      EncoderConfig cfg = tiny_config(PosEncKind::kAbsolute);
      cfg.ablation = AblationFlags::from_tag(tag);
      EncoderModel m = EncoderModel::init(cfg, 202);
      double worst = encoder_gradcheck(m);
      INFO(tag);
      CHECK(worst < 1e-3);
    }
  }
}

TEST_CASE("parameter count audit") {
  const int d = 64, v = 128;
  auto count = [&](PosEncKind kind, bool untie_cls = true, int max_positions = 0) {
    EncoderConfig cfg;
    cfg.layers = 2;
    cfg.d_model = d;
    cfg.d_ff = 4 * d;
    cfg.vocab_size = kNumSpecials + 2 * v;
    cfg.max_seq_len = 128;
    cfg.posenc = PosEncSpec::make(kind, d);
    cfg.posenc.untie_cls = untie_cls;
    if (max_positions > 0) cfg.posenc.max_positions = max_positions;
    EncoderModel m = EncoderModel::init(cfg, 1);
    return std::pair{m.param_count(), m.positional_param_count()};
  };

  auto [sin_total, sin_pos] = count(PosEncKind::kSinusoidal);
  CHECK(sin_pos == 0);
  auto [abs_total, abs_pos] = count(PosEncKind::kAbsolute);
  CHECK(abs_pos == 512 * 64);
  CHECK(abs_total - sin_total == 512 * 64);
  auto [rk_total, rk_pos] = count(PosEncKind::kRelativeKey);
  CHECK(rk_pos == 1023 * 64);
  CHECK(rk_total - sin_total == 1023 * 64);
  auto [rkq_total, rkq_pos] = count(PosEncKind::kRelativeKeyQuery);
  CHECK(rkq_pos == 1023 * 64);  // one table shared across both sides
  CHECK(rkq_total == rk_total);

  // TUPE kinds compared at equal table size: the relative variant adds
  // exactly its 32 bucket scalars
  auto [ta_total, ta_pos] = count(PosEncKind::kTupeAbsolute, true, 128);
  auto [tr_total, tr_pos] = count(PosEncKind::kTupeRelative, true, 128);
  CHECK(tr_total - ta_total == 32);
  auto [ta_tied_total, ta_tied_pos] = count(PosEncKind::kTupeAbsolute, false, 128);
  CHECK(ta_total - ta_tied_total == 2);  // theta1, theta2
  CHECK(ta_pos == 128 * 64 + 2 * 64 * 64 + 2);
  CHECK(count(PosEncKind::kTupeAbsolute).second == 512 * 64 + 2 * 64 * 64 + 2);
  (void)tr_pos;
  (void)ta_tied_pos;

  // parameter count is stable for a fixed config
  EncoderConfig cfg = tiny_config(PosEncKind::kAbsolute);
  EncoderModel a = EncoderModel::init(cfg, 5), b = EncoderModel::init(cfg, 99);
  CHECK(a.param_count() == b.param_count());
}

TEST_CASE("mlm_loss") {
  SECTION("perfect one-hot logits give near-zero loss") {
    Matrix logits(2, 6);
    logits.at(0, 3) = 100.0;
    logits.at(1, 1) = 100.0;
    CHECK(mlm_loss(logits, {3, 1}) < 1e-9);
  }
  SECTION("uniform logits over vocab 4101 give ln(4101)") {
    Matrix logits = Matrix::zeros(3, 4101);
    double loss = mlm_loss(logits, {5, 4100, -1});
    CHECK(loss == Catch::Approx(8.319).margin(1e-3));
  }
  SECTION("invariant to adding a constant per position") {
    Rng rng(66);
    Matrix logits = random_matrix(4, 9, rng);
    double before = mlm_loss(logits, {0, -1, 3, 8});
    for (int j = 0; j < 9; ++j) logits.at(2, j) += 11.0;
    CHECK(mlm_loss(logits, {0, -1, 3, 8}) == Catch::Approx(before).margin(1e-12));
  }
  SECTION("zero masked positions is an error") {
    Matrix logits = Matrix::zeros(2, 4);
    CHECK_THROWS(mlm_loss(logits, {-1, -1}));
  }
}

TEST_CASE("overlength input is rejected") {
  EncoderModel m = EncoderModel::init(tiny_config(PosEncKind::kSinusoidal), 3);
  std::vector<int> ids(m.config.max_seq_len + 1, 6);
  CHECK_THROWS_WITH(forward(m, ids), Catch::Matchers::ContainsSubstring("max_seq_len"));
}

TEST_CASE("multi-head configuration stays consistent") {
  EncoderConfig cfg = tiny_config(PosEncKind::kSinusoidal);
  cfg.heads = 2;
  EncoderModel m = EncoderModel::init(cfg, 77);
  std::vector<int> ids = {kCls, 6, 7, kSep};
  ForwardResult fr = forward(m, ids);
  CHECK(fr.states.back().rows == 4);
  ensure_finite(fr.mlm_logits, "multi-head logits");
}
