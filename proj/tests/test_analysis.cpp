#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "poslab/analysis.hpp"

using namespace poslab;
using poslab::testing::random_matrix;
using poslab::testing::random_orthogonal;

TEST_CASE("fit_orthogonal_procrustes") {
  Rng rng(1);
  SECTION("identity recovery") {
    Matrix a = random_matrix(10, 6, rng);
    Matrix t = fit_orthogonal_procrustes(a, a);
    CHECK(max_abs_diff(t, Matrix::identity(6)) < 1e-8);
    CHECK(procrustes_loss(a, a, t) < 1e-16);
  }
  SECTION("constructed isometry recovered") {
    Matrix a = random_matrix(12, 5, rng);
    Matrix q = random_orthogonal(5, rng);
    Matrix b = matmul_nt(a, q);  // rows of b are Q applied to rows of a
    Matrix t = fit_orthogonal_procrustes(a, b);
    CHECK(procrustes_loss(a, b, t) < 1e-8);
  }
  SECTION("returned map is always orthogonal") {
    for (int trial = 0; trial < 20; ++trial) {
      Matrix a = random_matrix(8, 4, rng);
      Matrix b = random_matrix(8, 4, rng);
      Matrix t = fit_orthogonal_procrustes(a, b);
      CHECK(max_abs_diff(matmul_tn(t, t), Matrix::identity(4)) < 1e-8);
    }
  }
  SECTION("2-D loss matches an exhaustive angle search") {
    for (int trial = 0; trial < 5; ++trial) {
      Matrix a = random_matrix(8, 2, rng);
      Matrix b = random_matrix(8, 2, rng);
      Matrix t = fit_orthogonal_procrustes(a, b);
      double closed = procrustes_loss(a, b, t, false);

      // orthogonal 2x2 maps are rotations and reflections of an angle
      double best = std::numeric_limits<double>::infinity();
      const int steps = 400000;
      for (int s = 0; s < steps; ++s) {
        double th = 2.0 * 3.14159265358979323846 * s / steps;
        double c = std::cos(th), sn = std::sin(th);
        for (int refl = 0; refl < 2; ++refl) {
          Matrix cand(2, 2, refl ? std::vector<double>{c, sn, sn, -c}
                                 : std::vector<double>{c, -sn, sn, c});
          best = std::min(best, procrustes_loss(a, b, cand, false));
        }
      }
      CHECK(closed <= best + 1e-9);          // closed form is the true minimum
      CHECK(best - closed < 1e-6);           // grid search converges to it
    }
  }
  SECTION("shape mismatch is an error") {
    CHECK_THROWS(fit_orthogonal_procrustes(Matrix(3, 2), Matrix(2, 3)));
  }
}

TEST_CASE("compositionality_loss") {
  SECTION("sinusoidal tables compose to numerical zero") {
    Matrix table = sinusoidal_table(512, 64);
    for (int k : {1, 7, 32}) {
      Rng rng(100 + k);
      ProcrustesResult r = compositionality_loss(table, k, 125, rng);
      INFO("offset " << k);
      CHECK(r.mean_loss < 1e-9);
      CHECK(static_cast<int>(r.losses.size()) == 125);
    }
  }
  SECTION("random tables are far from compositional") {
    Rng init(7);
    Matrix table = random_matrix(256, 32, init);
    Rng rng(8);
    ProcrustesResult r = compositionality_loss(table, 1, 125, rng);
    CHECK(r.mean_loss > 0.01);
  }
  SECTION("offset zero is exactly compositional") {
    Rng init(9), rng(10);
    Matrix table = random_matrix(128, 16, init);
    ProcrustesResult r = compositionality_loss(table, 0, 50, rng);
    CHECK(r.mean_loss < 1e-18);
  }
  SECTION("deterministic given the seed") {
    Matrix table = sinusoidal_table(256, 32);
    Rng a(77), b(77);
    ProcrustesResult ra = compositionality_loss(table, 5, 40, a);
    ProcrustesResult rb = compositionality_loss(table, 5, 40, b);
    CHECK(ra.losses == rb.losses);
    CHECK(ra.chunk_sizes == rb.chunk_sizes);
  }
  SECTION("invariant under a common orthogonal transform of the table") {
    Rng init(11);
    Matrix table = random_matrix(160, 24, init);
    Matrix q = random_orthogonal(24, init);
    Matrix rotated = matmul_nt(table, q);
    Rng a(5), b(5);
    ProcrustesResult orig = compositionality_loss(table, 3, 60, a);
    ProcrustesResult rot = compositionality_loss(rotated, 3, 60, b);
    for (size_t i = 0; i < orig.losses.size(); ++i)
      CHECK(orig.losses[i] == Catch::Approx(rot.losses[i]).margin(1e-8));
  }
  SECTION("losses are non-negative and the mean is consistent") {
    Rng init(12), rng(13);
    Matrix table = random_matrix(100, 8, init);
    ProcrustesResult r = compositionality_loss(table, 4, 30, rng);
    double sum = 0;
    for (double l : r.losses) {
      CHECK(l >= 0.0);
      sum += l;
    }
    CHECK(r.mean_loss == Catch::Approx(sum / 30).margin(1e-12));
  }
  SECTION("oversized offsets are rejected") {
    Matrix table = sinusoidal_table(32, 8);
    Rng rng(1);
    CHECK_THROWS_WITH(compositionality_loss(table, 30, 10, rng),
                      Catch::Matchers::ContainsSubstring("too large"));
  }
}

TEST_CASE("word_position_correlation") {
  auto make_model = [&](PosEncKind kind, uint64_t seed) {
    EncoderConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.vocab_size = kNumSpecials + 2 * 40;
    cfg.max_seq_len = 32;
    cfg.posenc = PosEncSpec::make(kind, 16);
    cfg.posenc.max_positions = 64;
    return EncoderModel::init(cfg, seed);
  };
  std::vector<int> sample;
  for (int v = kNumSpecials; v < kNumSpecials + 20; ++v) sample.push_back(v);

  SECTION("zero embeddings give a zero matrix") {
    EncoderModel m = make_model(PosEncKind::kAbsolute, 3);
    m.tok_embed = Matrix::zeros(m.config.vocab_size, m.config.d_model);
    auto [wp, pw] = word_position_correlation(m, 24, sample);
    CHECK(frobenius_sq(wp.values) == 0.0);
    CHECK(frobenius_sq(pw.values) == 0.0);
    CHECK(wp.values.rows == 20);
    CHECK(wp.values.cols == 24);
  }
  SECTION("untrained correlations are near zero across seeds") {
    for (uint64_t seed : {1, 2, 3, 4, 5}) {
      EncoderModel m = make_model(PosEncKind::kAbsolute, seed);
      auto [wp, pw] = word_position_correlation(m, 24, sample);
      double mean_abs = 0;
      for (double v : wp.values.data) mean_abs += std::abs(v);
      mean_abs /= static_cast<double>(wp.values.size());
      CHECK(mean_abs < 0.01);
    }
  }
  SECTION("banding statistic positive for any nonzero matrix") {
    Rng rng(6);
    Matrix m = random_matrix(10, 8, rng);
    CHECK(banding_statistic(m) > 0.0);
    CHECK(banding_statistic(Matrix::zeros(4, 4)) == 0.0);
  }
  SECTION("kinds without an additive table are rejected") {
    EncoderModel m = make_model(PosEncKind::kTupeAbsolute, 3);
    CHECK_THROWS(word_position_correlation(m, 24, sample));
  }
  SECTION("sinusoidal kind uses the fixed table") {
    EncoderModel m = make_model(PosEncKind::kSinusoidal, 3);
    auto [wp, pw] = word_position_correlation(m, 8, sample);
    CHECK(wp.values.rows == 20);
    CHECK(pw.values.rows == 20);
  }
}

TEST_CASE("zscore normalizes to zero mean unit variance") {
  Rng rng(15);
  Matrix m = random_matrix(12, 9, rng, 4.0);
  Matrix z = zscore(m);
  double mean = 0, var = 0;
  for (double v : z.data) mean += v;
  mean /= static_cast<double>(z.size());
  for (double v : z.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(z.size());
  CHECK(mean == Catch::Approx(0.0).margin(1e-9));
  CHECK(var == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("export_encoding_dims") {
  EncoderConfig cfg;
  cfg.layers = 1;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.vocab_size = kNumSpecials + 2 * 10;
  cfg.max_seq_len = 32;
  cfg.posenc = PosEncSpec::make(PosEncKind::kSinusoidal, 16);
  cfg.posenc.max_positions = 64;
  EncoderModel m = EncoderModel::init(cfg, 1);

  SECTION("sinusoidal dim 0 equals sin(pos)") {
    auto points = export_encoding_dims(m, {0}, 32);
    REQUIRE(points.size() == 32);
    for (const auto& pt : points)
      CHECK(pt.value == Catch::Approx(std::sin(pt.position)).margin(1e-12));
  }
  SECTION("row count is |dims| x |positions|") {
    auto points = export_encoding_dims(m, {0, 4, 8, 15}, 32);
    CHECK(points.size() == 4 * 32);
  }
  SECTION("relative kinds export a window centered on the zero offset") {
    EncoderConfig rcfg = cfg;
    rcfg.posenc = PosEncSpec::make(PosEncKind::kRelativeKey, 16);
    rcfg.posenc.max_positions = 64;
    EncoderModel rm = EncoderModel::init(rcfg, 1);
    Rng rng(4);
    for (double& v : rm.pos.table.data) v = rng.normal();
    auto points = export_encoding_dims(rm, {0, 3}, 32);
    REQUIRE(points.size() == 2 * 32);
    int center_row = rcfg.posenc.max_positions - 1;
    for (const auto& pt : points) {
      CHECK(pt.position >= -16);
      CHECK(pt.position < 16);
      CHECK(pt.value == rm.pos.table.at(center_row + pt.position, pt.dim));
    }
  }
  SECTION("out-of-range dims rejected") {
    CHECK_THROWS(export_encoding_dims(m, {99}, 8));
  }
}

TEST_CASE("wilcoxon signed rank") {
  SECTION("hand-computed 10-sample fixture") {
    // diffs: +1 -2 +3 -4 +5 +6 +7 +8 +9 +10 -> ranks equal |diff|
    std::vector<double> x = {1, 0, 3, 0, 5, 6, 7, 8, 9, 10};
    std::vector<double> y = {0, 2, 0, 4, 0, 0, 0, 0, 0, 0};
    WilcoxonResult r = wilcoxon_signed_rank(x, y);
    REQUIRE(r.n == 10);
    CHECK(r.exact);
    for (size_t i = 0; i < x.size(); ++i)
      CHECK(r.ranks[i] == std::abs(x[i] - y[i]));
    CHECK(r.w_plus == 49.0);
    CHECK(r.w_minus == 6.0);
    // exact two-sided p: 2 * (#subsets of {1..10} with sum <= 6) / 2^10
    CHECK(r.p_two_sided == Catch::Approx(28.0 / 1024.0).margin(1e-12));
  }
  SECTION("tied magnitudes get average ranks") {
    std::vector<double> x = {1, 0, 2, 2};
    std::vector<double> y = {0, 1, 0, 0};
    WilcoxonResult r = wilcoxon_signed_rank(x, y);
    REQUIRE(r.n == 4);
    CHECK(r.ranks[0] == 1.5);
    CHECK(r.ranks[1] == 1.5);
    CHECK(r.ranks[2] == 3.5);
    CHECK(r.ranks[3] == 3.5);
    CHECK_FALSE(r.exact);
    CHECK(r.p_two_sided > 0.0);
    CHECK(r.p_two_sided <= 1.0);
  }
  SECTION("zero differences are dropped") {
    std::vector<double> x = {5, 5, 5, 1};
    std::vector<double> y = {5, 5, 5, 0};
    WilcoxonResult r = wilcoxon_signed_rank(x, y);
    CHECK(r.n == 1);
  }
  SECTION("clearly shifted large samples are significant (normal path)") {
    std::vector<double> x, y;
    Rng rng(19);
    for (int i = 0; i < 32; ++i) {
      double base = rng.uniform(0, 1);
      x.push_back(base);
      y.push_back(base + 0.5 + 0.1 * rng.uniform());
    }
    WilcoxonResult r = wilcoxon_signed_rank(x, y);
    CHECK_FALSE(r.exact);
    CHECK(r.p_two_sided < 0.001);
    CHECK(r.w_plus == 0.0);  // every difference negative
  }
  SECTION("identical samples are not significant") {
    std::vector<double> x = {1, 2, 3, 4};
    WilcoxonResult r = wilcoxon_signed_rank(x, x);
    CHECK(r.n == 0);
    CHECK(r.p_two_sided == 1.0);
  }
}

TEST_CASE("analysis_encoding_table per kind") {
  auto cfg_for = [&](PosEncKind kind) {
    EncoderConfig cfg;
    cfg.layers = 1;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.vocab_size = kNumSpecials + 2 * 10;
    cfg.max_seq_len = 16;
    cfg.posenc = PosEncSpec::make(kind, 8);
    cfg.posenc.max_positions = kind == PosEncKind::kTupeRelative ? 32 : 24;
    cfg.posenc.num_buckets = 8;
    return cfg;
  };
  EncoderModel sin_m = EncoderModel::init(cfg_for(PosEncKind::kSinusoidal), 1);
  CHECK(max_abs_diff(analysis_encoding_table(sin_m), sin_m.sin_table) == 0.0);

  EncoderModel abs_m = EncoderModel::init(cfg_for(PosEncKind::kAbsolute), 1);
  CHECK(max_abs_diff(analysis_encoding_table(abs_m), abs_m.pos.table) == 0.0);

  EncoderModel tupe_m = EncoderModel::init(cfg_for(PosEncKind::kTupeAbsolute), 1);
  CHECK(max_abs_diff(analysis_encoding_table(tupe_m), tupe_m.pos.table) == 0.0);
  Matrix projected = analysis_encoding_table(tupe_m, true);
  CHECK(max_abs_diff(projected, matmul(tupe_m.pos.table, tupe_m.pos.uk)) == 0.0);
}
