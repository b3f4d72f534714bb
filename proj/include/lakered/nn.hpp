#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lakered/grid.hpp"
#include "lakered/rng.hpp"

namespace lakered::nn {

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> w;
  std::vector<T> g;

  void resize(std::string n, std::vector<int> s) {
    name = std::move(n);
    shape = std::move(s);
    size_t total = 1;
    for (int d : shape) total *= size_t(d);
    w.assign(total, T(0));
    g.assign(total, T(0));
  }
  size_t count() const { return w.size(); }
};

template <typename T>
struct ParamSet {
  std::vector<Param<T>*> items;

  void add(Param<T>& p) { items.push_back(&p); }
  void add(ParamSet<T>& other) {
    items.insert(items.end(), other.items.begin(), other.items.end());
  }
  size_t total_count() const {
    size_t n = 0;
    for (auto* p : items) n += p->count();
    return n;
  }
  void zero_grad() {
    for (auto* p : items)
      std::fill(p->g.begin(), p->g.end(), T(0));
  }
  Param<T>* find(const std::string& name) const {
    for (auto* p : items)
      if (p->name == name) return p;
    return nullptr;
  }
};

template <typename T>
void init_normal(Param<T>& p, Rng& rng, double stddev) {
  for (auto& x : p.w) x = T(rng.normal() * stddev);
}

// Kaiming-style init for a layer with the given fan-in.
template <typename T>
void init_he(Param<T>& p, Rng& rng, size_t fan_in) {
  init_normal(p, rng, std::sqrt(2.0 / double(fan_in)));
}

template <typename T>
struct Adam {
  T lr = T(1e-3), beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
  long t = 0;
  std::vector<std::vector<T>> m, v;

  void init(const ParamSet<T>& ps) {
    m.clear();
    v.clear();
    for (auto* p : ps.items) {
      m.emplace_back(p->count(), T(0));
      v.emplace_back(p->count(), T(0));
    }
    t = 0;
  }

  void step(ParamSet<T>& ps) {
    ++t;
    const T bc1 = T(1) - std::pow(beta1, T(t));
    const T bc2 = T(1) - std::pow(beta2, T(t));
    for (size_t i = 0; i < ps.items.size(); ++i) {
      auto& p = *ps.items[i];
      for (size_t j = 0; j < p.count(); ++j) {
        const T g = p.g[j];
        m[i][j] = beta1 * m[i][j] + (T(1) - beta1) * g;
        v[i][j] = beta2 * v[i][j] + (T(1) - beta2) * g * g;
        p.w[j] -= lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Layers. Each instance owns its parameters and caches whatever the matching
// backward pass needs; instances sit at fixed positions inside a network and
// run single-writer.
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  Param<T> weight;  // (out, in)
  Param<T> bias;    // (out)
  int in = 0, out = 0;
  MatX<T> x_cache;

  void init(const std::string& name, int in_, int out_, Rng& rng) {
    in = in_;
    out = out_;
    weight.resize(name + ".weight", {out, in});
    bias.resize(name + ".bias", {out});
    init_he(weight, rng, size_t(in));
  }
  void collect(ParamSet<T>& ps) {
    ps.add(weight);
    ps.add(bias);
  }

  // x: (n, in) -> (n, out)
  MatX<T> forward(const MatX<T>& x) {
    x_cache = x;
    Eigen::Map<const MatX<T>> W(weight.w.data(), out, in);
    Eigen::Map<const VecX<T>> b(bias.w.data(), out);
    MatX<T> y = x * W.transpose();
    y.rowwise() += b.transpose();
    return y;
  }

  MatX<T> backward(const MatX<T>& dy) {
    Eigen::Map<const MatX<T>> W(weight.w.data(), out, in);
    Eigen::Map<MatX<T>> dW(weight.g.data(), out, in);
    Eigen::Map<VecX<T>> db(bias.g.data(), out);
    dW.noalias() += dy.transpose() * x_cache;
    db.noalias() += dy.colwise().sum().transpose();
    return dy * W;
  }
};

// 2D convolution over channel-last grids via im2col + GEMM.
// Kernel k in {1,3}, stride in {1,2}, padding k/2.
template <typename T>
struct Conv2d {
  Param<T> weight;  // (co, k*k*ci)
  Param<T> bias;    // (co)
  int ci = 0, co = 0, k = 3, stride = 1;
  int xh = 0, xw = 0, oh = 0, ow = 0;
  MatX<T> cols;  // (oh*ow, k*k*ci)

  void init(const std::string& name, int ci_, int co_, int k_, int stride_,
            Rng& rng) {
    ci = ci_;
    co = co_;
    k = k_;
    stride = stride_;
    weight.resize(name + ".weight", {co, k * k * ci});
    bias.resize(name + ".bias", {co});
    init_he(weight, rng, size_t(k) * k * ci);
  }
  void collect(ParamSet<T>& ps) {
    ps.add(weight);
    ps.add(bias);
  }

  Grid<T> forward(const Grid<T>& x) {
    xh = x.h;
    xw = x.w;
    const int pad = k / 2;
    oh = (x.h + 2 * pad - k) / stride + 1;
    ow = (x.w + 2 * pad - k) / stride + 1;
    cols.resize(oh * ow, k * k * ci);
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) {
        T* row = cols.data() + (size_t(y) * ow + xo) * cols.cols();
        for (int ky = 0; ky < k; ++ky) {
          const int sy = y * stride + ky - pad;
          for (int kx = 0; kx < k; ++kx) {
            const int sx = xo * stride + kx - pad;
            T* dst = row + (ky * k + kx) * ci;
            if (sy >= 0 && sy < x.h && sx >= 0 && sx < x.w) {
              const T* src = &x.at(sy, sx, 0);
              for (int ch = 0; ch < ci; ++ch) dst[ch] = src[ch];
            } else {
              for (int ch = 0; ch < ci; ++ch) dst[ch] = T(0);
            }
          }
        }
      }
    Grid<T> out(oh, ow, co);
    Eigen::Map<const MatX<T>> W(weight.w.data(), co, k * k * ci);
    Eigen::Map<const VecX<T>> b(bias.w.data(), co);
    auto y = out.cells();
    y.noalias() = cols * W.transpose();
    y.rowwise() += b.transpose();
    return out;
  }

  Grid<T> backward(const Grid<T>& dy) {
    Eigen::Map<const MatX<T>> W(weight.w.data(), co, k * k * ci);
    Eigen::Map<MatX<T>> dW(weight.g.data(), co, k * k * ci);
    Eigen::Map<VecX<T>> db(bias.g.data(), co);
    auto dyc = dy.cells();
    dW.noalias() += dyc.transpose() * cols;
    db.noalias() += dyc.colwise().sum().transpose();

    MatX<T> dcols = dyc * W;
    Grid<T> dx(xh, xw, ci);
    const int pad = k / 2;
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) {
        const T* row = dcols.data() + (size_t(y) * ow + xo) * dcols.cols();
        for (int ky = 0; ky < k; ++ky) {
          const int sy = y * stride + ky - pad;
          if (sy < 0 || sy >= xh) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int sx = xo * stride + kx - pad;
            if (sx < 0 || sx >= xw) continue;
            const T* src = row + (ky * k + kx) * ci;
            T* dst = &dx.at(sy, sx, 0);
            for (int ch = 0; ch < ci; ++ch) dst[ch] += src[ch];
          }
        }
      }
    return dx;
  }
};

template <typename T>
struct GroupNorm {
  Param<T> gamma, beta;
  int c = 0, groups = 1;
  T eps = T(1e-5);
  Grid<T> xhat;
  std::vector<T> invstd;

  void init(const std::string& name, int c_, int groups_) {
    c = c_;
    groups = groups_;
    while (c % groups != 0) --groups;  // keep a valid divisor
    gamma.resize(name + ".gamma", {c});
    beta.resize(name + ".beta", {c});
    std::fill(gamma.w.begin(), gamma.w.end(), T(1));
  }
  void collect(ParamSet<T>& ps) {
    ps.add(gamma);
    ps.add(beta);
  }

  Grid<T> forward(const Grid<T>& x) {
    const int cg = c / groups;
    const size_t n = size_t(x.h) * x.w * cg;
    xhat = Grid<T>(x.h, x.w, x.c);
    invstd.assign(groups, T(0));
    Grid<T> out(x.h, x.w, x.c);
    for (int g = 0; g < groups; ++g) {
      T mean = 0, var = 0;
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx)
          for (int ch = g * cg; ch < (g + 1) * cg; ++ch) mean += x.at(y, xx, ch);
      mean /= T(n);
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx)
          for (int ch = g * cg; ch < (g + 1) * cg; ++ch) {
            const T d = x.at(y, xx, ch) - mean;
            var += d * d;
          }
      var /= T(n);
      const T inv = T(1) / std::sqrt(var + eps);
      invstd[g] = inv;
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx)
          for (int ch = g * cg; ch < (g + 1) * cg; ++ch) {
            const T xh_ = (x.at(y, xx, ch) - mean) * inv;
            xhat.at(y, xx, ch) = xh_;
            out.at(y, xx, ch) = gamma.w[ch] * xh_ + beta.w[ch];
          }
    }
    return out;
  }

  Grid<T> backward(const Grid<T>& dy) {
    const int cg = c / groups;
    const size_t n = size_t(dy.h) * dy.w * cg;
    Grid<T> dx(dy.h, dy.w, dy.c);
    for (int y = 0; y < dy.h; ++y)
      for (int xx = 0; xx < dy.w; ++xx)
        for (int ch = 0; ch < c; ++ch) {
          gamma.g[ch] += dy.at(y, xx, ch) * xhat.at(y, xx, ch);
          beta.g[ch] += dy.at(y, xx, ch);
        }
    for (int g = 0; g < groups; ++g) {
      T sum_dxhat = 0, sum_dxhat_xhat = 0;
      for (int y = 0; y < dy.h; ++y)
        for (int xx = 0; xx < dy.w; ++xx)
          for (int ch = g * cg; ch < (g + 1) * cg; ++ch) {
            const T dxh = dy.at(y, xx, ch) * gamma.w[ch];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat.at(y, xx, ch);
          }
      const T inv_n = T(1) / T(n);
      for (int y = 0; y < dy.h; ++y)
        for (int xx = 0; xx < dy.w; ++xx)
          for (int ch = g * cg; ch < (g + 1) * cg; ++ch) {
            const T dxh = dy.at(y, xx, ch) * gamma.w[ch];
            dx.at(y, xx, ch) =
                invstd[g] * (dxh - inv_n * sum_dxhat -
                             xhat.at(y, xx, ch) * inv_n * sum_dxhat_xhat);
          }
    }
    return dx;
  }
};

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
struct SiLU {
  Grid<T> x_cache;

  Grid<T> forward(const Grid<T>& x) {
    x_cache = x;
    Grid<T> out = x;
    for (auto& v : out.v) v = v * sigmoid(v);
    return out;
  }
  Grid<T> backward(const Grid<T>& dy) {
    Grid<T> dx = dy;
    for (size_t i = 0; i < dx.v.size(); ++i) {
      const T s = sigmoid(x_cache.v[i]);
      dx.v[i] *= s * (T(1) + x_cache.v[i] * (T(1) - s));
    }
    return dx;
  }
};

template <typename T>
Grid<T> upsample2x_nearest(const Grid<T>& x) {
  Grid<T> out(x.h * 2, x.w * 2, x.c);
  for (int y = 0; y < out.h; ++y)
    for (int xx = 0; xx < out.w; ++xx)
      for (int ch = 0; ch < x.c; ++ch)
        out.at(y, xx, ch) = x.at(y / 2, xx / 2, ch);
  return out;
}

template <typename T>
Grid<T> upsample2x_nearest_backward(const Grid<T>& dy) {
  Grid<T> dx(dy.h / 2, dy.w / 2, dy.c);
  for (int y = 0; y < dy.h; ++y)
    for (int xx = 0; xx < dy.w; ++xx)
      for (int ch = 0; ch < dy.c; ++ch)
        dx.at(y / 2, xx / 2, ch) += dy.at(y, xx, ch);
  return dx;
}

// Sinusoidal timestep embedding, half sine / half cosine.
template <typename T>
VecX<T> timestep_embedding(int t, int dim) {
  VecX<T> emb(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
    emb[i] = T(std::sin(t * freq));
    emb[half + i] = T(std::cos(t * freq));
  }
  if (dim % 2) emb[dim - 1] = T(0);
  return emb;
}

}  // namespace lakered::nn
