#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "lakered/conditioning.hpp"
#include "test_util.hpp"

using namespace lakered;

namespace {

// From-scratch attention oracle (plain loops, no Eigen) for Eq.-4 checks.
MatX<double> bkrm_oracle(const MatX<double>& xf, const MatX<double>& eg,
                         const RetrievalParams<double>& p) {
  const int n = int(xf.rows()), K = int(eg.rows());
  std::vector<std::vector<double>> concat(
      size_t(n), std::vector<double>(size_t(p.heads) * p.dv, 0.0));
  for (int head = 0; head < p.heads; ++head) {
    std::vector<std::vector<double>> q(size_t(n), std::vector<double>(p.dk, 0));
    std::vector<std::vector<double>> key(size_t(K), std::vector<double>(p.dk, 0));
    std::vector<std::vector<double>> val(size_t(K), std::vector<double>(p.dv, 0));
    for (int r = 0; r < n; ++r)
      for (int k = 0; k < p.dk; ++k)
        for (int c = 0; c < p.query_dim; ++c)
          q[r][k] += xf(r, c) *
                     p.wq.w[(size_t(head) * p.query_dim + c) * p.dk + k];
    for (int t = 0; t < K; ++t)
      for (int k = 0; k < p.dk; ++k)
        for (int d = 0; d < p.token_dim; ++d)
          key[t][k] += eg(t, d) *
                       p.wk.w[(size_t(head) * p.token_dim + d) * p.dk + k];
    for (int t = 0; t < K; ++t)
      for (int v = 0; v < p.dv; ++v)
        for (int d = 0; d < p.token_dim; ++d)
          val[t][v] += eg(t, d) *
                       p.wv.w[(size_t(head) * p.token_dim + d) * p.dv + v];
    for (int r = 0; r < n; ++r) {
      std::vector<double> logits(size_t(K), 0);
      for (int t = 0; t < K; ++t) {
        for (int k = 0; k < p.dk; ++k) logits[t] += q[r][k] * key[t][k];
        logits[t] /= std::sqrt(double(p.dk));
      }
      double denom = 0;
      std::vector<double> weights(size_t(K), 0);
      for (int t = 0; t < K; ++t) {
        weights[t] = std::exp(logits[t]);
        denom += weights[t];
      }
      for (int t = 0; t < K; ++t) weights[t] /= denom;
      for (int v = 0; v < p.dv; ++v)
        for (int t = 0; t < K; ++t)
          concat[r][size_t(head) * p.dv + v] += weights[t] * val[t][v];
    }
  }
  MatX<double> out = MatX<double>::Zero(n, p.query_dim);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < p.query_dim; ++c)
      for (int j = 0; j < p.heads * p.dv; ++j)
        out(r, c) += concat[r][size_t(j)] *
                     p.wout.w[size_t(j) * p.query_dim + c];
  return out;
}

SuperpixelMap two_region_map(int h, int w) {
  // Foreground rows 1..h-1, split into left/right labels.
  SuperpixelMap spx;
  spx.h = h;
  spx.w = w;
  spx.count = 2;
  spx.labels.assign(size_t(h) * w, -1);
  for (int y = 1; y < h - 1; ++y)
    for (int x = 0; x < w; ++x) spx.label_at(y, x) = x < w / 2 ? 0 : 1;
  spx.centers.assign(2, SuperpixelCenter{});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int l = spx.label_at(y, x);
      if (l < 0) continue;
      spx.centers[l].y += y;
      spx.centers[l].x += x;
      spx.centers[l].cells += 1;
    }
  for (auto& c : spx.centers) {
    c.y /= c.cells;
    c.x /= c.cells;
  }
  return spx;
}

Mask mask_from_map(const SuperpixelMap& spx) {
  Mask cm(spx.h, spx.w, 1);
  for (int y = 0; y < spx.h; ++y)
    for (int x = 0; x < spx.w; ++x)
      if (spx.label_at(y, x) >= 0) cm.at(y, x) = 0;
  return cm;
}

}  // namespace

TEST_CASE("masked_average_pool constant and forced-arithmetic cases") {
  GridD cf(3, 3, 3, 0.7);
  Mask cm = testutil::random_mask(3, 3, *new Rng(1));
  auto d = masked_average_pool(cf, cm);
  for (int c = 0; c < 3; ++c) REQUIRE(d.vectors(0, c) == Catch::Approx(0.7));

  // 2x2 single-channel-style grid: foreground at (0,0) and (1,1).
  GridD g(2, 2, 1);
  g.at(0, 0, 0) = 1;
  g.at(0, 1, 0) = 2;
  g.at(1, 0, 0) = 3;
  g.at(1, 1, 0) = 4;
  Mask m(2, 2, 1);
  m.at(0, 0) = 0;
  m.at(1, 1) = 0;
  // (1 + 4) / 2
  REQUIRE(masked_average_pool(g, m).vectors(0, 0) == Catch::Approx(2.5));

  Mask empty(2, 2, 1);
  REQUIRE_THROWS_AS(masked_average_pool(g, empty), DataError);
}

TEST_CASE("masked_average_pool matches the loop oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = rng.uniform_int(2, 6), w = rng.uniform_int(2, 6);
    GridD cf = testutil::random_grid_d(h, w, 3, rng);
    Mask cm = testutil::random_mask(h, w, rng);
    auto d = masked_average_pool(cf, cm);
    for (int c = 0; c < 3; ++c) {
      double sum = 0, count = 0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (cm.at(y, x) == 0) {
            sum += cf.at(y, x, c);
            count += 1;
          }
      REQUIRE(d.vectors(0, c) == Catch::Approx(sum / count).epsilon(1e-6));
    }
  }
}

TEST_CASE("localized_masked_pool reduces to MAP at s'=1 and averages regions") {
  Rng rng(3);
  GridD cf = testutil::random_grid_d(4, 4, 3, rng);
  Mask cm = testutil::random_mask(4, 4, rng);
  SuperpixelMap trivial = trivial_superpixel_map(cm);
  auto lmp = localized_masked_pool(cf, trivial);
  auto map = masked_average_pool(cf, cm);
  REQUIRE(lmp.vectors.rows() == 1);
  for (int c = 0; c < 3; ++c)
    REQUIRE(lmp.vectors(0, c) == Catch::Approx(map.vectors(0, c)).epsilon(1e-12));

  // Two constant regions pool to their constants.
  SuperpixelMap spx = two_region_map(4, 6);
  GridD g(4, 6, 3);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x)
      for (int c = 0; c < 3; ++c)
        g.at(y, x, c) = spx.label_at(y, x) == 0 ? 2.0 : -1.0;
  auto d = localized_masked_pool(g, spx);
  REQUIRE(d.vectors.rows() == 2);
  for (int c = 0; c < 3; ++c) {
    REQUIRE(d.vectors(0, c) == Catch::Approx(2.0));
    REQUIRE(d.vectors(1, c) == Catch::Approx(-1.0));
  }
}

TEST_CASE("localized_masked_pool matches the per-label loop oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = rng.uniform_int(3, 6), w = rng.uniform_int(3, 6);
    GridD cf = testutil::random_grid_d(h, w, 3, rng);
    Mask cm = testutil::random_mask(h, w, rng);
    SuperpixelMap spx = compute_superpixels(cf, cm, 3, 10.0, 4, trial);
    auto d = localized_masked_pool(cf, spx);
    REQUIRE(d.vectors.rows() == spx.count);
    for (int l = 0; l < spx.count; ++l)
      for (int c = 0; c < 3; ++c) {
        double sum = 0, count = 0;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            if (spx.label_at(y, x) == l) {
              sum += cf.at(y, x, c);
              count += 1;
            }
        REQUIRE(d.vectors(l, c) == Catch::Approx(sum / count).epsilon(1e-6));
      }
  }
}

TEST_CASE("bkrm uniform-softmax and one-hot limits") {
  Rng rng(5);
  RetrievalParams<double> p;
  p.init(2, 3, 3, 4, 4, rng);
  const int K = 6;
  MatX<double> eg(K, 3);
  for (int i = 0; i < eg.size(); ++i) eg.data()[i] = rng.uniform(-1, 1);

  // Zero query projections force identical logits -> uniform weights.
  std::fill(p.wq.w.begin(), p.wq.w.end(), 0.0);
  MatX<double> xf(1, 3);
  xf << 0.3, -0.2, 0.9;
  RetrievalCache<double> cache;
  MatX<double> xb = bkrm_retrieve(xf, eg, p, &cache);
  for (int head = 0; head < 2; ++head)
    for (int t = 0; t < K; ++t)
      REQUIRE(cache.attention[head](0, t) == Catch::Approx(1.0 / K).epsilon(1e-9));
  // Output equals the mean value projection pushed through W^{f->b}.
  MatX<double> mean_concat(1, 2 * 4);
  for (int head = 0; head < 2; ++head) {
    MatX<double> values = eg * p.head_wv(head);
    mean_concat.block(0, head * 4, 1, 4) = values.colwise().mean();
  }
  Eigen::Map<const MatX<double>> wout(p.wout.w.data(), 8, 3);
  MatX<double> expected = mean_concat * wout;
  for (int c = 0; c < 3; ++c)
    REQUIRE(xb(0, c) == Catch::Approx(expected(0, c)).epsilon(1e-9));

  // Dominant-margin query: attention collapses onto one token.
  Rng rng2(6);
  RetrievalParams<double> p1;
  p1.init(1, 2, 2, 2, 2, rng2);
  MatX<double> tokens(3, 2);
  tokens << 100.0, 0.0, 0.0, 100.0, -100.0, -100.0;
  MatX<double> q1(1, 2);
  q1 << 100.0, 0.0;
  // Identity projections.
  p1.wq.w = {1, 0, 0, 1};
  p1.wk.w = {1, 0, 0, 1};
  p1.wv.w = {1, 0, 0, 1};
  p1.wout.w = {1, 0, 0, 1};  // 2x2 identity back to query_dim=2
  RetrievalCache<double> c1;
  MatX<double> out = bkrm_retrieve(q1, tokens, p1, &c1);
  REQUIRE(c1.attention[0](0, 0) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(out(0, 0) == Catch::Approx(100.0).margin(1e-9));
  REQUIRE(out(0, 1) == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("bkrm matches the from-scratch loop oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    RetrievalParams<double> p;
    p.init(2, 3, 3, 2, 2, rng);
    MatX<double> eg(4, 3);
    for (int i = 0; i < eg.size(); ++i) eg.data()[i] = rng.uniform(-1, 1);
    const int n = rng.uniform_int(1, 3);
    MatX<double> xf(n, 3);
    for (int i = 0; i < xf.size(); ++i) xf.data()[i] = rng.uniform(-1, 1);

    MatX<double> got = bkrm_retrieve(xf, eg, p);
    MatX<double> expected = bkrm_oracle(xf, eg, p);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < 3; ++c)
        REQUIRE(got(r, c) == Catch::Approx(expected(r, c)).epsilon(1e-6).margin(1e-9));
  }
}

TEST_CASE("attention rows sum to one for arbitrary finite inputs") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    RetrievalParams<double> p;
    p.init(3, 3, 3, 4, 4, rng);
    // Stretch some parameters to probe extreme logits.
    for (auto& v : p.wq.w) v *= 50.0;
    MatX<double> eg(8, 3);
    for (int i = 0; i < eg.size(); ++i) eg.data()[i] = rng.uniform(-5, 5);
    MatX<double> xf(2, 3);
    for (int i = 0; i < xf.size(); ++i) xf.data()[i] = rng.uniform(-5, 5);
    RetrievalCache<double> cache;
    bkrm_retrieve(xf, eg, p, &cache);
    for (int head = 0; head < 3; ++head)
      for (int r = 0; r < 2; ++r) {
        REQUIRE(cache.attention[head].row(r).sum() ==
                Catch::Approx(1.0).margin(1e-6));
        for (int t = 0; t < 8; ++t)
          REQUIRE(cache.attention[head](r, t) >= 0.0);
      }
  }
}

TEST_CASE("pre-projection head outputs stay in the value convex hull") {
  // dv=2 and K=3: the hull is a triangle, so containment has a geometric
  // oracle via signed areas.
  Rng rng(9);
  for (int trial = 0; trial < 25; ++trial) {
    RetrievalParams<double> p;
    p.init(1, 2, 2, 2, 2, rng);
    MatX<double> eg(3, 2);
    for (int i = 0; i < eg.size(); ++i) eg.data()[i] = rng.uniform(-2, 2);
    MatX<double> xf(2, 2);
    for (int i = 0; i < xf.size(); ++i) xf.data()[i] = rng.uniform(-2, 2);
    RetrievalCache<double> cache;
    bkrm_retrieve(xf, eg, p, &cache);
    MatX<double> values = eg * p.head_wv(0);

    auto cross = [](double ax, double ay, double bx, double by, double px,
                    double py) {
      return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    };
    for (int r = 0; r < 2; ++r) {
      const double px = cache.concat_heads(r, 0), py = cache.concat_heads(r, 1);
      const double d1 = cross(values(0, 0), values(0, 1), values(1, 0),
                              values(1, 1), px, py);
      const double d2 = cross(values(1, 0), values(1, 1), values(2, 0),
                              values(2, 1), px, py);
      const double d3 = cross(values(2, 0), values(2, 1), values(0, 0),
                              values(0, 1), px, py);
      const bool has_neg = (d1 < -1e-9) || (d2 < -1e-9) || (d3 < -1e-9);
      const bool has_pos = (d1 > 1e-9) || (d2 > 1e-9) || (d3 > 1e-9);
      REQUIRE(!(has_neg && has_pos));  // inside or on the triangle boundary
      // Certificate: the attention weights are a convex combination.
      REQUIRE(cache.attention[0].row(r).sum() == Catch::Approx(1.0).margin(1e-9));
      REQUIRE(cache.attention[0].row(r).minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("scatter_upsample broadcast, ownership and nearest-centroid fill") {
  SuperpixelMap spx = two_region_map(4, 6);
  MatX<double> xb(2, 3);
  xb << 1, 2, 3, -1, -2, -3;
  Grid<double> grid = scatter_upsample(xb, spx, 4, 6);

  // Foreground cells carry their own label's vector.
  for (int y = 1; y < 3; ++y)
    for (int x = 0; x < 6; ++x)
      for (int c = 0; c < 3; ++c)
        REQUIRE(grid.at(y, x, c) == xb(spx.label_at(y, x), c));

  // Background cells: nearest spatial centroid oracle.
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x) {
      if (spx.label_at(y, x) >= 0) continue;
      int best = 0;
      double best_d = 1e300;
      for (int l = 0; l < 2; ++l) {
        const double dy = y - spx.centers[l].y, dx = x - spx.centers[l].x;
        const double d = dy * dy + dx * dx;
        if (d < best_d) {
          best_d = d;
          best = l;
        }
      }
      for (int c = 0; c < 3; ++c) REQUIRE(grid.at(y, x, c) == xb(best, c));
    }

  // s'=1 broadcasts everywhere.
  Mask cm = mask_from_map(spx);
  SuperpixelMap trivial = trivial_superpixel_map(cm);
  MatX<double> one(1, 3);
  one << 5, 6, 7;
  Grid<double> b = scatter_upsample(one, trivial, 4, 6);
  for (int cell = 0; cell < 24; ++cell)
    for (int c = 0; c < 3; ++c) REQUIRE(b.v[size_t(cell) * 3 + c] == one(0, c));

  REQUIRE_THROWS_AS(scatter_upsample(xb, trivial, 4, 6), DataError);
}

TEST_CASE("rcem_fuse pointwise purity, zero case and loop oracle") {
  Rng rng(10);
  FusionParams<double> p;
  p.init(3, rng);
  for (auto& v : p.w2.w) v = rng.uniform(-0.5, 0.5);
  for (auto& v : p.b2.w) v = rng.uniform(-0.5, 0.5);

  // Identical inputs at two cells produce identical outputs.
  Grid<double> cf(1, 2, 3), xb(1, 2, 3);
  for (int c = 0; c < 3; ++c) {
    cf.at(0, 0, c) = cf.at(0, 1, c) = 0.3 * (c + 1);
    xb.at(0, 0, c) = xb.at(0, 1, c) = -0.2 * (c + 1);
  }
  Grid<double> out = rcem_fuse(cf, xb, p);
  for (int c = 0; c < 3; ++c) REQUIRE(out.at(0, 0, c) == out.at(0, 1, c));

  // All-zero parameters give the zero grid.
  FusionParams<double> zero;
  zero.init(3, rng);
  std::fill(zero.w1.w.begin(), zero.w1.w.end(), 0.0);
  std::fill(zero.b1.w.begin(), zero.b1.w.end(), 0.0);
  Grid<double> z = rcem_fuse(cf, xb, zero);
  for (double v : z.v) REQUIRE(v == 0.0);

  // Loop oracle over random instances.
  for (int trial = 0; trial < 100; ++trial) {
    FusionParams<double> fp;
    fp.init(3, rng);
    for (auto& v : fp.w2.w) v = rng.uniform(-1, 1);
    for (auto& v : fp.b2.w) v = rng.uniform(-1, 1);
    Grid<double> a = testutil::random_grid_d(3, 3, 3, rng);
    Grid<double> b = testutil::random_grid_d(3, 3, 3, rng);
    Grid<double> got = rcem_fuse(a, b, fp);
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        double input[6];
        for (int c = 0; c < 3; ++c) {
          input[c] = a.at(y, x, c);
          input[3 + c] = b.at(y, x, c);
        }
        double hidden[12];
        for (int hcol = 0; hcol < 12; ++hcol) {
          double acc = fp.b1.w[hcol];
          for (int c = 0; c < 6; ++c) acc += fp.w1.w[size_t(hcol) * 6 + c] * input[c];
          hidden[hcol] = acc / (1.0 + std::exp(-acc));
        }
        for (int c = 0; c < 3; ++c) {
          double acc = fp.b2.w[c];
          for (int hcol = 0; hcol < 12; ++hcol)
            acc += fp.w2.w[size_t(c) * 12 + hcol] * hidden[hcol];
          REQUIRE(got.at(y, x, c) ==
                  Catch::Approx(acc).epsilon(1e-6).margin(1e-12));
        }
      }
  }
}

TEST_CASE("enhance_condition select semantics and bitwise preservation") {
  Rng rng(11);
  GridD cf = testutil::random_grid_d(4, 4, 3, rng);
  GridD zr = testutil::random_grid_d(4, 4, 3, rng);

  Mask zeros(4, 4, 0), ones(4, 4, 1);
  CHECK(enhance_condition(cf, zr, zeros).features.v == cf.v);
  CHECK(enhance_condition(cf, zr, ones).features.v == zr.v);

  for (int trial = 0; trial < 50; ++trial) {
    Mask cm = testutil::random_mask(4, 4, rng);
    auto enhanced = enhance_condition(cf, zr, cm);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        for (int c = 0; c < 3; ++c) {
          const double expected = cm.at(y, x) ? zr.at(y, x, c) : cf.at(y, x, c);
          // Bitwise equality, not approximate.
          REQUIRE(enhanced.features.at(y, x, c) == expected);
        }
    REQUIRE(enhanced.mask.v == cm.v);
  }
}

TEST_CASE("bgrec_loss zero case, single-cell arithmetic and loop oracle") {
  GridD z(2, 2, 3, 0.4);
  Mask cm = testutil::random_mask(2, 2, *new Rng(12));
  CHECK(bgrec_loss(z, z, cm) == 0.0);

  GridD zr(1, 1, 3, 0.0), z0(1, 1, 3, 0.0);
  zr.at(0, 0, 1) = 0.3;
  Mask bg(1, 1, 1);
  REQUIRE(bgrec_loss(zr, z0, bg) == Catch::Approx(0.09 / 3.0).epsilon(1e-12));

  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = rng.uniform_int(2, 5), w = rng.uniform_int(2, 5);
    GridD a = testutil::random_grid_d(h, w, 3, rng);
    GridD b = testutil::random_grid_d(h, w, 3, rng);
    Mask cm = testutil::random_mask(h, w, rng);
    double sum = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          const double d = a.at(y, x, c) * cm.at(y, x) - b.at(y, x, c) * cm.at(y, x);
          sum += d * d;
        }
    const double expected = sum / (h * w * 3);
    REQUIRE(bgrec_loss(a, b, cm) == Catch::Approx(expected).epsilon(1e-6).margin(1e-15));
  }
}

TEST_CASE("full LMP path with s=1 equals the MAP broadcast path exactly") {
  Rng rng(14);
  RetrievalParams<double> p;
  p.init(2, 3, 3, 4, 4, rng);
  FusionParams<double> fp;
  fp.init(3, rng);
  for (auto& v : fp.w2.w) v = rng.uniform(-1, 1);
  MatX<double> eg(8, 3);
  for (int i = 0; i < eg.size(); ++i) eg.data()[i] = rng.uniform(-1, 1);

  GridD cf = testutil::random_grid_d(4, 4, 3, rng);
  Mask cm = testutil::random_mask(4, 4, rng);

  // LMP path with the single-superpixel partition.
  SuperpixelMap trivial = trivial_superpixel_map(cm);
  auto xf_lmp = localized_masked_pool(cf, trivial);
  MatX<double> xb_lmp = bkrm_retrieve(xf_lmp.vectors, eg, p);
  Grid<double> grid_lmp = scatter_upsample(xb_lmp, trivial, 4, 4);

  // MAP path with explicit broadcast.
  auto xf_map = masked_average_pool(cf, cm);
  MatX<double> xb_map = bkrm_retrieve(xf_map.vectors, eg, p);
  Grid<double> grid_map(4, 4, 3);
  for (int cell = 0; cell < 16; ++cell)
    for (int c = 0; c < 3; ++c) grid_map.v[size_t(cell) * 3 + c] = xb_map(0, c);

  REQUIRE(xf_lmp.vectors == xf_map.vectors);
  REQUIRE(grid_lmp.v == grid_map.v);
  Grid<double> zr_lmp = rcem_fuse(cf, grid_lmp, fp);
  Grid<double> zr_map = rcem_fuse(cf, grid_map, fp);
  REQUIRE(zr_lmp.v == zr_map.v);
}

TEST_CASE("conditioning path gradients match central finite differences") {
  // 4x4 latent, K=8, 2 heads, s=2, double precision.
  Rng rng(15);
  RetrievalParams<double> retrieval;
  retrieval.init(2, 3, 3, 3, 3, rng);
  FusionParams<double> fusion;
  fusion.init(3, rng);
  for (auto& v : fusion.w2.w) v = rng.uniform(-0.5, 0.5);
  for (auto& v : fusion.b2.w) v = rng.uniform(-0.2, 0.2);
  MatX<double> eg(8, 3);
  for (int i = 0; i < eg.size(); ++i) eg.data()[i] = rng.uniform(-1, 1);

  GridD cf = testutil::random_grid_d(4, 4, 3, rng);
  GridD z0 = testutil::random_grid_d(4, 4, 3, rng);
  Mask cm = testutil::random_mask(4, 4, rng);
  SuperpixelMap spx = compute_superpixels(cf, cm, 2, 10.0, 5, 99);

  auto loss = [&]() {
    auto xf = localized_masked_pool(cf, spx);
    MatX<double> xb = bkrm_retrieve(xf.vectors, eg, retrieval);
    Grid<double> grid = scatter_upsample(xb, spx, 4, 4);
    Grid<double> z_rec = rcem_fuse(cf, grid, fusion);
    return bgrec_loss(z_rec, z0, cm);
  };

  // Analytic gradients via the training stack.
  ConditioningStack<double> stack;
  stack.retrieval = &retrieval;
  stack.fusion = &fusion;
  stack.eg = &eg;
  nn::ParamSet<double> ps;
  retrieval.collect(ps);
  fusion.collect(ps);
  ps.zero_grad();
  stack.forward(cf, cm, spx);
  Grid<double> dzrec = bgrec_loss_backward(stack.z_rec, z0, cm);
  Grid<double> zero_dfeat(4, 4, 3);
  stack.backward(zero_dfeat, &dzrec);

  for (auto* p : ps.items) {
    VecX<double> analytic(p->count()), fd(p->count());
    for (size_t j = 0; j < p->count(); ++j) {
      analytic[Eigen::Index(j)] = p->g[j];
      const double orig = p->w[j];
      const double h = 1e-6;
      p->w[j] = orig + h;
      const double lp = loss();
      p->w[j] = orig - h;
      const double lm = loss();
      p->w[j] = orig;
      fd[Eigen::Index(j)] = (lp - lm) / (2 * h);
    }
    INFO("param " << p->name);
    const double denom = std::max(fd.norm(), 1e-12);
    REQUIRE((analytic - fd).norm() / denom < 1e-4);
  }
}
