#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lakered/grid.hpp"
#include "lakered/nn.hpp"
#include "lakered/superpixel.hpp"

namespace lakered {

enum class PoolMode { MAP, LMP };

// Pooled foreground feature vectors: one row per superpixel (a single row in
// MAP mode).
template <typename T>
struct ForegroundDescriptor {
  MatX<T> vectors;  // s' x c
  PoolMode mode = PoolMode::MAP;
};

// Per-channel mean over foreground cells (latent mask == 0).
template <typename T>
ForegroundDescriptor<T> masked_average_pool(const Grid<T>& cf, const Mask& cm) {
  if (cf.h != cm.h || cf.w != cm.w)
    throw DataError("masked_average_pool: shape mismatch");
  ForegroundDescriptor<T> out;
  out.mode = PoolMode::MAP;
  out.vectors = MatX<T>::Zero(1, cf.c);
  size_t n = 0;
  for (int y = 0; y < cf.h; ++y)
    for (int x = 0; x < cf.w; ++x)
      if (cm.at(y, x) == 0) {
        ++n;
        for (int ch = 0; ch < cf.c; ++ch) out.vectors(0, ch) += cf.at(y, x, ch);
      }
  if (n == 0) throw DataError("masked_average_pool: empty foreground");
  out.vectors /= T(n);
  return out;
}

// Per-channel mean within each superpixel.
template <typename T>
ForegroundDescriptor<T> localized_masked_pool(const Grid<T>& cf,
                                              const SuperpixelMap& spx) {
  if (cf.h != spx.h || cf.w != spx.w)
    throw DataError("localized_masked_pool: shape mismatch");
  ForegroundDescriptor<T> out;
  out.mode = PoolMode::LMP;
  out.vectors = MatX<T>::Zero(spx.count, cf.c);
  std::vector<size_t> counts(size_t(spx.count), 0);
  for (int y = 0; y < cf.h; ++y)
    for (int x = 0; x < cf.w; ++x) {
      const int l = spx.label_at(y, x);
      if (l < 0) continue;
      counts[l] += 1;
      for (int ch = 0; ch < cf.c; ++ch) out.vectors(l, ch) += cf.at(y, x, ch);
    }
  for (int l = 0; l < spx.count; ++l) {
    if (counts[l] == 0) throw DataError("localized_masked_pool: empty label");
    out.vectors.row(l) /= T(counts[l]);
  }
  return out;
}

// Multi-head attention over the frozen codebook tokens: queries come from
// pooled foreground features, keys/values from E_g. No biases.
template <typename T>
struct RetrievalParams {
  int heads = 4, query_dim = 3, token_dim = 3, dk = 16, dv = 16;
  nn::Param<T> wq;    // (heads, query_dim, dk)
  nn::Param<T> wk;    // (heads, token_dim, dk)
  nn::Param<T> wv;    // (heads, token_dim, dv)
  nn::Param<T> wout;  // (heads*dv, query_dim)

  void init(int heads_, int query_dim_, int token_dim_, int dk_, int dv_,
            Rng& rng) {
    heads = heads_;
    query_dim = query_dim_;
    token_dim = token_dim_;
    dk = dk_;
    dv = dv_;
    wq.resize("retrieval.wq", {heads, query_dim, dk});
    wk.resize("retrieval.wk", {heads, token_dim, dk});
    wv.resize("retrieval.wv", {heads, token_dim, dv});
    wout.resize("retrieval.wout", {heads * dv, query_dim});
    nn::init_normal(wq, rng, 1.0 / std::sqrt(double(query_dim)));
    nn::init_normal(wk, rng, 1.0 / std::sqrt(double(token_dim)));
    nn::init_normal(wv, rng, 1.0 / std::sqrt(double(token_dim)));
    nn::init_normal(wout, rng, 1.0 / std::sqrt(double(heads * dv)));
  }
  void collect(nn::ParamSet<T>& ps) {
    ps.add(wq);
    ps.add(wk);
    ps.add(wv);
    ps.add(wout);
  }

  Eigen::Map<const MatX<T>> head_wq(int i) const {
    return {wq.w.data() + size_t(i) * query_dim * dk, query_dim, dk};
  }
  Eigen::Map<const MatX<T>> head_wk(int i) const {
    return {wk.w.data() + size_t(i) * token_dim * dk, token_dim, dk};
  }
  Eigen::Map<const MatX<T>> head_wv(int i) const {
    return {wv.w.data() + size_t(i) * token_dim * dv, token_dim, dv};
  }
};

template <typename T>
struct RetrievalCache {
  MatX<T> xf;                     // queries (s' x c)
  std::vector<MatX<T>> queries;   // per head (s' x dk)
  std::vector<MatX<T>> attention; // per head (s' x K), rows sum to 1
  MatX<T> concat_heads;           // (s' x heads*dv)
};

// Eq.-style retrieval: a_i = softmax(QK^T / sqrt(dk)), h_i = a_i V,
// x^b = Concat(h_1..h_H) W^{f->b}.
template <typename T>
MatX<T> bkrm_retrieve(const MatX<T>& xf, const MatX<T>& eg,
                      const RetrievalParams<T>& params,
                      RetrievalCache<T>* cache = nullptr) {
  if (xf.cols() != params.query_dim)
    throw DataError("bkrm_retrieve: query dim mismatch");
  if (eg.cols() != params.token_dim)
    throw DataError("bkrm_retrieve: token dim mismatch");
  const auto n = xf.rows();
  const T scale = T(1) / std::sqrt(T(params.dk));
  MatX<T> concat(n, params.heads * params.dv);
  if (cache) {
    cache->xf = xf;
    cache->queries.assign(size_t(params.heads), {});
    cache->attention.assign(size_t(params.heads), {});
  }
  for (int i = 0; i < params.heads; ++i) {
    MatX<T> q = xf * params.head_wq(i);
    MatX<T> keys = eg * params.head_wk(i);
    MatX<T> values = eg * params.head_wv(i);
    MatX<T> logits = q * keys.transpose() * scale;
    MatX<T> attn(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const T m = logits.row(r).maxCoeff();
      attn.row(r) = (logits.row(r).array() - m).exp();
      attn.row(r) /= attn.row(r).sum();
    }
    concat.block(0, i * params.dv, n, params.dv) = attn * values;
    if (cache) {
      cache->queries[i] = std::move(q);
      cache->attention[i] = std::move(attn);
    }
  }
  if (cache) cache->concat_heads = concat;
  Eigen::Map<const MatX<T>> wout(params.wout.w.data(),
                                 params.heads * params.dv, params.query_dim);
  return concat * wout;
}

// Accumulates parameter gradients; returns d(xf) for completeness.
template <typename T>
MatX<T> bkrm_retrieve_backward(const MatX<T>& dxb, const MatX<T>& eg,
                               RetrievalParams<T>& params,
                               const RetrievalCache<T>& cache) {
  Eigen::Map<const MatX<T>> wout(params.wout.w.data(),
                                 params.heads * params.dv, params.query_dim);
  Eigen::Map<MatX<T>> dwout(params.wout.g.data(), params.heads * params.dv,
                            params.query_dim);
  dwout.noalias() += cache.concat_heads.transpose() * dxb;
  MatX<T> dconcat = dxb * wout.transpose();
  MatX<T> dxf = MatX<T>::Zero(cache.xf.rows(), cache.xf.cols());
  const T scale = T(1) / std::sqrt(T(params.dk));

  for (int i = 0; i < params.heads; ++i) {
    const auto n = cache.xf.rows();
    MatX<T> keys = eg * params.head_wk(i);
    MatX<T> values = eg * params.head_wv(i);
    MatX<T> dhead = dconcat.block(0, i * params.dv, n, params.dv);
    const MatX<T>& attn = cache.attention[i];

    MatX<T> dvalues = attn.transpose() * dhead;
    MatX<T> dattn = dhead * values.transpose();
    MatX<T> dlogits(dattn.rows(), dattn.cols());
    for (Eigen::Index r = 0; r < dattn.rows(); ++r) {
      const T dot = (dattn.row(r).array() * attn.row(r).array()).sum();
      dlogits.row(r) =
          attn.row(r).array() * (dattn.row(r).array() - dot) * scale;
    }
    MatX<T> dq = dlogits * keys;
    MatX<T> dkeys = dlogits.transpose() * cache.queries[i];

    Eigen::Map<MatX<T>> dwq(params.wq.g.data() + size_t(i) * params.query_dim * params.dk,
                            params.query_dim, params.dk);
    Eigen::Map<MatX<T>> dwk(params.wk.g.data() + size_t(i) * params.token_dim * params.dk,
                            params.token_dim, params.dk);
    Eigen::Map<MatX<T>> dwv(params.wv.g.data() + size_t(i) * params.token_dim * params.dv,
                            params.token_dim, params.dv);
    dwq.noalias() += cache.xf.transpose() * dq;
    dwk.noalias() += eg.transpose() * dkeys;
    dwv.noalias() += eg.transpose() * dvalues;
    dxf.noalias() += dq * params.head_wq(i).transpose();
  }
  return dxf;
}

// Turns s' retrieved vectors into a spatial grid: foreground cells take their
// own superpixel's vector; background cells take the vector of the superpixel
// with the nearest spatial centroid (ties to the lowest label). With s'=1
// this is a plain broadcast.
template <typename T>
Grid<T> scatter_upsample(const MatX<T>& xb, const SuperpixelMap& spx, int h,
                         int w, std::vector<int>* cell_to_row = nullptr) {
  if (xb.rows() != spx.count)
    throw DataError("scatter_upsample: row/label count mismatch");
  if (spx.count < 1) throw DataError("scatter_upsample: empty superpixel map");
  Grid<T> out(h, w, int(xb.cols()));
  if (cell_to_row) cell_to_row->assign(size_t(h) * w, -1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int row = spx.label_at(y, x);
      if (row < 0) {
        double best = 0;
        row = 0;
        for (int l = 0; l < spx.count; ++l) {
          const double dy = y - spx.centers[l].y;
          const double dx = x - spx.centers[l].x;
          const double d = dy * dy + dx * dx;
          if (l == 0 || d < best) {
            best = d;
            row = l;
          }
        }
      }
      if (cell_to_row) (*cell_to_row)[size_t(y) * w + x] = row;
      for (int ch = 0; ch < out.c; ++ch) out.at(y, x, ch) = xb(row, ch);
    }
  return out;
}

template <typename T>
MatX<T> scatter_upsample_backward(const Grid<T>& dgrid,
                                  const std::vector<int>& cell_to_row,
                                  int rows) {
  MatX<T> dxb = MatX<T>::Zero(rows, dgrid.c);
  for (int cell = 0; cell < dgrid.h * dgrid.w; ++cell) {
    const int row = cell_to_row[cell];
    for (int ch = 0; ch < dgrid.c; ++ch)
      dxb(row, ch) += dgrid.v[size_t(cell) * dgrid.c + ch];
  }
  return dxb;
}

// Pointwise two-layer perceptron mapping the 2c-wide concatenation of
// condition features and scattered background features back to c channels.
template <typename T>
struct FusionParams {
  int c = 3, hidden = 12;
  nn::Param<T> w1, b1;  // (hidden, 2c), (hidden)
  nn::Param<T> w2, b2;  // (c, hidden), (c)

  void init(int c_, Rng& rng) {
    c = c_;
    hidden = 4 * c_;
    w1.resize("fusion.w1", {hidden, 2 * c});
    b1.resize("fusion.b1", {hidden});
    w2.resize("fusion.w2", {c, hidden});
    b2.resize("fusion.b2", {c});
    nn::init_he(w1, rng, size_t(2) * c);
    // w2/b2 start at zero so the enhanced condition begins as a neutral fill.
  }
  void collect(nn::ParamSet<T>& ps) {
    ps.add(w1);
    ps.add(b1);
    ps.add(w2);
    ps.add(b2);
  }
};

template <typename T>
struct FusionCache {
  MatX<T> input;   // (cells, 2c)
  MatX<T> hidden;  // pre-activation (cells, hidden)
};

template <typename T>
Grid<T> rcem_fuse(const Grid<T>& cf, const Grid<T>& xb_grid,
                  const FusionParams<T>& params,
                  FusionCache<T>* cache = nullptr) {
  if (!cf.same_shape(xb_grid)) throw DataError("rcem_fuse: shape mismatch");
  const int cells = cf.h * cf.w;
  MatX<T> input(cells, 2 * cf.c);
  input.block(0, 0, cells, cf.c) = cf.cells();
  input.block(0, cf.c, cells, cf.c) = xb_grid.cells();

  Eigen::Map<const MatX<T>> w1(params.w1.w.data(), params.hidden, 2 * params.c);
  Eigen::Map<const VecX<T>> b1(params.b1.w.data(), params.hidden);
  Eigen::Map<const MatX<T>> w2(params.w2.w.data(), params.c, params.hidden);
  Eigen::Map<const VecX<T>> b2(params.b2.w.data(), params.c);

  MatX<T> pre = input * w1.transpose();
  pre.rowwise() += b1.transpose();
  MatX<T> act = pre.unaryExpr([](T v) { return v * nn::sigmoid(v); });
  Grid<T> out(cf.h, cf.w, cf.c);
  auto oc = out.cells();
  oc.noalias() = act * w2.transpose();
  oc.rowwise() += b2.transpose();
  if (cache) {
    cache->input = std::move(input);
    cache->hidden = std::move(pre);
  }
  return out;
}

// Returns d(xb_grid); condition features are frozen encoder outputs so their
// gradient is not propagated further.
template <typename T>
Grid<T> rcem_fuse_backward(const Grid<T>& dout, FusionParams<T>& params,
                           const FusionCache<T>& cache) {
  const int cells = dout.h * dout.w;
  Eigen::Map<const MatX<T>> w1(params.w1.w.data(), params.hidden, 2 * params.c);
  Eigen::Map<const MatX<T>> w2(params.w2.w.data(), params.c, params.hidden);
  Eigen::Map<MatX<T>> dw1(params.w1.g.data(), params.hidden, 2 * params.c);
  Eigen::Map<VecX<T>> db1(params.b1.g.data(), params.hidden);
  Eigen::Map<MatX<T>> dw2(params.w2.g.data(), params.c, params.hidden);
  Eigen::Map<VecX<T>> db2(params.b2.g.data(), params.c);

  MatX<T> act =
      cache.hidden.unaryExpr([](T v) { return v * nn::sigmoid(v); });
  auto dyc = dout.cells();
  dw2.noalias() += dyc.transpose() * act;
  db2.noalias() += dyc.colwise().sum().transpose();
  MatX<T> dact = dyc * w2;
  MatX<T> dpre = dact.binaryExpr(cache.hidden, [](T g, T v) {
    const T s = nn::sigmoid(v);
    return g * s * (T(1) + v * (T(1) - s));
  });
  dw1.noalias() += dpre.transpose() * cache.input;
  db1.noalias() += dpre.colwise().sum().transpose();
  MatX<T> dinput = dpre * w1;

  Grid<T> dxb(dout.h, dout.w, params.c);
  dxb.cells() = dinput.block(0, params.c, cells, params.c);
  return dxb;
}

template <typename T>
struct EnhancedCondition {
  Grid<T> features;  // c̃^f: cf on foreground cells, z_rec on background cells
  Mask mask;         // c^m
};

// Exact per-cell select, so the foreground region of the condition is
// bitwise-identical to cf.
template <typename T>
EnhancedCondition<T> enhance_condition(const Grid<T>& cf, const Grid<T>& z_rec,
                                       const Mask& cm) {
  if (!cf.same_shape(z_rec) || cf.h != cm.h || cf.w != cm.w)
    throw DataError("enhance_condition: shape mismatch");
  EnhancedCondition<T> out;
  out.mask = cm;
  out.features = cf;
  for (int y = 0; y < cf.h; ++y)
    for (int x = 0; x < cf.w; ++x)
      if (cm.at(y, x))
        for (int ch = 0; ch < cf.c; ++ch)
          out.features.at(y, x, ch) = z_rec.at(y, x, ch);
  return out;
}

// Eq.-9 style background reconstruction loss, additionally averaged over
// channels so the scale does not depend on c.
template <typename T>
double bgrec_loss(const Grid<T>& z_rec, const Grid<T>& z0, const Mask& cm) {
  if (!z_rec.same_shape(z0) || z_rec.h != cm.h || z_rec.w != cm.w)
    throw DataError("bgrec_loss: shape mismatch");
  double sum = 0;
  for (int y = 0; y < cm.h; ++y)
    for (int x = 0; x < cm.w; ++x) {
      const double m = cm.at(y, x);
      for (int ch = 0; ch < z_rec.c; ++ch) {
        const double d =
            double(z_rec.at(y, x, ch)) * m - double(z0.at(y, x, ch)) * m;
        sum += d * d;
      }
    }
  return sum / (double(cm.h) * cm.w * z_rec.c);
}

template <typename T>
Grid<T> bgrec_loss_backward(const Grid<T>& z_rec, const Grid<T>& z0,
                            const Mask& cm, double loss_scale = 1.0) {
  Grid<T> dz(z_rec.h, z_rec.w, z_rec.c);
  const double norm = 2.0 * loss_scale / (double(cm.h) * cm.w * z_rec.c);
  for (int y = 0; y < cm.h; ++y)
    for (int x = 0; x < cm.w; ++x) {
      if (!cm.at(y, x)) continue;
      for (int ch = 0; ch < z_rec.c; ++ch)
        dz.at(y, x, ch) =
            T(norm * (double(z_rec.at(y, x, ch)) - double(z0.at(y, x, ch))));
    }
  return dz;
}

// A single-label partition covering the whole foreground; the MAP pipeline
// shares the LMP code path through it.
inline SuperpixelMap trivial_superpixel_map(const Mask& cm) {
  SuperpixelMap map;
  map.h = cm.h;
  map.w = cm.w;
  map.count = 1;
  map.labels.assign(size_t(cm.h) * cm.w, -1);
  SuperpixelCenter c;
  c.feat = {};
  for (int y = 0; y < cm.h; ++y)
    for (int x = 0; x < cm.w; ++x)
      if (cm.at(y, x) == 0) {
        map.label_at(y, x) = 0;
        c.y += y;
        c.x += x;
        c.cells += 1;
      }
  if (c.cells == 0) throw DataError("trivial_superpixel_map: empty foreground");
  c.y /= c.cells;
  c.x /= c.cells;
  map.centers = {c};
  return map;
}

// ---------------------------------------------------------------------------
// Differentiable conditioning stack used during diffusion training: pool ->
// retrieve -> scatter -> fuse -> enhance, with a backward pass that
// accumulates retrieval and fusion parameter gradients.
// ---------------------------------------------------------------------------

template <typename T>
struct ConditioningStack {
  RetrievalParams<T>* retrieval = nullptr;
  FusionParams<T>* fusion = nullptr;
  const MatX<T>* eg = nullptr;

  RetrievalCache<T> retrieval_cache;
  FusionCache<T> fusion_cache;
  std::vector<int> cell_to_row;
  Grid<T> cf, z_rec;
  Mask cm;
  int rows = 0;

  EnhancedCondition<T> forward(const Grid<T>& cf_, const Mask& cm_,
                               const SuperpixelMap& spx) {
    cf = cf_;
    cm = cm_;
    ForegroundDescriptor<T> xf = localized_masked_pool(cf, spx);
    rows = int(xf.vectors.rows());
    MatX<T> xb = bkrm_retrieve(xf.vectors, *eg, *retrieval, &retrieval_cache);
    Grid<T> xb_grid = scatter_upsample(xb, spx, cf.h, cf.w, &cell_to_row);
    z_rec = rcem_fuse(cf, xb_grid, *fusion, &fusion_cache);
    return enhance_condition(cf, z_rec, cm);
  }

  // d_features: gradient w.r.t. the enhanced condition features (from the
  // denoiser); d_zrec_extra: direct gradient w.r.t. z_rec (from the
  // background reconstruction loss), may be null.
  void backward(const Grid<T>& d_features, const Grid<T>* d_zrec_extra) {
    Grid<T> dz(cf.h, cf.w, cf.c);
    for (int y = 0; y < cf.h; ++y)
      for (int x = 0; x < cf.w; ++x)
        if (cm.at(y, x))
          for (int ch = 0; ch < cf.c; ++ch)
            dz.at(y, x, ch) = d_features.at(y, x, ch);
    if (d_zrec_extra)
      for (size_t i = 0; i < dz.v.size(); ++i) dz.v[i] += d_zrec_extra->v[i];
    Grid<T> dxb_grid = rcem_fuse_backward(dz, *fusion, fusion_cache);
    MatX<T> dxb = scatter_upsample_backward(dxb_grid, cell_to_row, rows);
    bkrm_retrieve_backward(dxb, *eg, *retrieval, retrieval_cache);
  }
};

}  // namespace lakered
