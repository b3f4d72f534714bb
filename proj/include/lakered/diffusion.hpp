#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lakered/autoencoder.hpp"
#include "lakered/conditioning.hpp"
#include "lakered/grid.hpp"
#include "lakered/image.hpp"
#include "lakered/nn.hpp"

namespace lakered {

// Linear variance schedule. alpha_bar[0] = 1 by convention; step t in [1, T]
// reads alpha_bar[t].
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;       // size T, beta[t-1] is step t
  std::vector<double> alpha_bar;  // size T+1, cumulative products
};

inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("schedule: require 0 < beta_start <= beta_end < 1");
  NoiseSchedule ns;
  ns.steps = T;
  ns.beta.resize(T);
  ns.alpha_bar.resize(T + 1);
  ns.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : double(t - 1) / double(T - 1);
    ns.beta[t - 1] = beta_start + (beta_end - beta_start) * frac;
    ns.alpha_bar[t] = ns.alpha_bar[t - 1] * (1.0 - ns.beta[t - 1]);
  }
  return ns;
}

// Standard variance-preserving forward process:
// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps.
template <typename T>
Grid<T> forward_noise(const Grid<T>& z0, int t, const Grid<T>& eps,
                      const NoiseSchedule& ns) {
  if (t < 1 || t > ns.steps) throw DataError("forward_noise: t out of range");
  if (!z0.same_shape(eps)) throw DataError("forward_noise: eps shape mismatch");
  const T a = T(std::sqrt(ns.alpha_bar[t]));
  const T b = T(std::sqrt(1.0 - ns.alpha_bar[t]));
  Grid<T> zt = z0;
  for (size_t i = 0; i < zt.v.size(); ++i)
    zt.v[i] = a * z0.v[i] + b * eps.v[i];
  return zt;
}

// ---------------------------------------------------------------------------
// Denoiser: a small U-Net over channel-last latent grids. Input is the
// concatenation [z_t | condition features | condition mask], so the channel
// width is latent_c + cond_c + 1.
// ---------------------------------------------------------------------------

template <typename T>
struct ResBlock {
  int ci = 0, co = 0;
  nn::GroupNorm<T> gn1, gn2;
  nn::Conv2d<T> conv1, conv2, skip;
  nn::Linear<T> temb_proj;
  nn::SiLU<T> act1, act2;
  bool has_skip = false;
  Grid<T> x_cache;

  void init(const std::string& name, int ci_, int co_, int temb_dim, Rng& rng) {
    ci = ci_;
    co = co_;
    gn1.init(name + ".gn1", ci, std::min(8, ci));
    conv1.init(name + ".conv1", ci, co, 3, 1, rng);
    temb_proj.init(name + ".temb", temb_dim, co, rng);
    gn2.init(name + ".gn2", co, std::min(8, co));
    conv2.init(name + ".conv2", co, co, 3, 1, rng);
    has_skip = ci != co;
    if (has_skip) skip.init(name + ".skip", ci, co, 1, 1, rng);
  }
  void collect(nn::ParamSet<T>& ps) {
    gn1.collect(ps);
    conv1.collect(ps);
    temb_proj.collect(ps);
    gn2.collect(ps);
    conv2.collect(ps);
    if (has_skip) skip.collect(ps);
  }

  Grid<T> forward(const Grid<T>& x, const MatX<T>& temb) {
    x_cache = x;
    Grid<T> h = conv1.forward(act1.forward(gn1.forward(x)));
    MatX<T> tb = temb_proj.forward(temb);  // (1, co)
    for (int cell = 0; cell < h.h * h.w; ++cell)
      for (int ch = 0; ch < co; ++ch)
        h.v[size_t(cell) * co + ch] += tb(0, ch);
    h = conv2.forward(act2.forward(gn2.forward(h)));
    Grid<T> base = has_skip ? skip.forward(x) : x;
    for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += base.v[i];
    return h;
  }

  Grid<T> backward(const Grid<T>& dy, MatX<T>& dtemb) {
    Grid<T> dh = gn2.backward(act2.backward(conv2.backward(dy)));
    MatX<T> dtb = MatX<T>::Zero(1, co);
    for (int cell = 0; cell < dh.h * dh.w; ++cell)
      for (int ch = 0; ch < co; ++ch)
        dtb(0, ch) += dh.v[size_t(cell) * co + ch];
    dtemb += temb_proj.backward(dtb);
    Grid<T> dx = gn1.backward(act1.backward(conv1.backward(dh)));
    if (has_skip) {
      Grid<T> ds = skip.backward(dy);
      for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += ds.v[i];
    } else {
      for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i];
    }
    return dx;
  }
};

template <typename T>
struct UNet {
  int latent_c = 3, cond_c = 3, width = 32, temb_dim = 64;
  static constexpr int kTimeFreqDim = 32;

  nn::Linear<T> temb_fc1, temb_fc2;
  nn::Conv2d<T> conv_in, down, up_conv, conv_out;
  ResBlock<T> rb_enc, rb_bottom, rb_mid, rb_dec;
  nn::GroupNorm<T> gn_out;
  nn::SiLU<T> act_temb, act_out;
  Grid<T> skip_cache;

  void init(int latent_c_, int cond_c_, int width_, Rng& rng) {
    latent_c = latent_c_;
    cond_c = cond_c_;
    width = width_;
    temb_dim = 2 * width;
    const int in_ch = latent_c + cond_c + 1;
    temb_fc1.init("unet.temb_fc1", kTimeFreqDim, temb_dim, rng);
    temb_fc2.init("unet.temb_fc2", temb_dim, temb_dim, rng);
    conv_in.init("unet.conv_in", in_ch, width, 3, 1, rng);
    rb_enc.init("unet.rb_enc", width, width, temb_dim, rng);
    down.init("unet.down", width, 2 * width, 3, 2, rng);
    rb_bottom.init("unet.rb_bottom", 2 * width, 2 * width, temb_dim, rng);
    rb_mid.init("unet.rb_mid", 2 * width, 2 * width, temb_dim, rng);
    up_conv.init("unet.up_conv", 2 * width, width, 3, 1, rng);
    rb_dec.init("unet.rb_dec", 2 * width, width, temb_dim, rng);
    gn_out.init("unet.gn_out", width, std::min(8, width));
    conv_out.init("unet.conv_out", width, latent_c, 3, 1, rng);
    // Zero-init output projection: the denoiser starts as the zero map.
    std::fill(conv_out.weight.w.begin(), conv_out.weight.w.end(), T(0));
  }

  void collect(nn::ParamSet<T>& ps) {
    temb_fc1.collect(ps);
    temb_fc2.collect(ps);
    conv_in.collect(ps);
    rb_enc.collect(ps);
    down.collect(ps);
    rb_bottom.collect(ps);
    rb_mid.collect(ps);
    up_conv.collect(ps);
    rb_dec.collect(ps);
    gn_out.collect(ps);
    conv_out.collect(ps);
  }

  size_t param_count() {
    nn::ParamSet<T> ps;
    collect(ps);
    return ps.total_count();
  }

 private:
  MatX<T> temb_cache_;
  nn::SiLU<T> temb_act_;
  Grid<T> temb_silu_in_;

 public:
  // Assemble [z_t | cond features | mask] and predict the noise.
  Grid<T> forward(const Grid<T>& zt, const Grid<T>& cond_features,
                  const Mask& cond_mask, int t) {
    if (zt.c != latent_c || cond_features.c != cond_c ||
        zt.h != cond_features.h || zt.w != cond_features.w ||
        zt.h != cond_mask.h || zt.w != cond_mask.w)
      throw DataError("denoise_predict: shape mismatch");

    Grid<T> input(zt.h, zt.w, latent_c + cond_c + 1);
    for (int y = 0; y < zt.h; ++y)
      for (int x = 0; x < zt.w; ++x) {
        for (int ch = 0; ch < latent_c; ++ch)
          input.at(y, x, ch) = zt.at(y, x, ch);
        for (int ch = 0; ch < cond_c; ++ch)
          input.at(y, x, latent_c + ch) = cond_features.at(y, x, ch);
        input.at(y, x, latent_c + cond_c) = T(cond_mask.at(y, x));
      }

    MatX<T> tfreq(1, kTimeFreqDim);
    VecX<T> emb = nn::timestep_embedding<T>(t, kTimeFreqDim);
    for (int i = 0; i < kTimeFreqDim; ++i) tfreq(0, i) = emb[i];
    MatX<T> temb = temb_fc1.forward(tfreq);
    // SiLU on the 1 x temb_dim row.
    temb_silu_in_ = Grid<T>(1, 1, temb_dim);
    for (int i = 0; i < temb_dim; ++i) temb_silu_in_.v[i] = temb(0, i);
    Grid<T> tact = temb_act_.forward(temb_silu_in_);
    for (int i = 0; i < temb_dim; ++i) temb(0, i) = tact.v[i];
    temb = temb_fc2.forward(temb);
    temb_cache_ = temb;

    Grid<T> h = conv_in.forward(input);
    Grid<T> enc = rb_enc.forward(h, temb);
    skip_cache = enc;
    Grid<T> mid = rb_bottom.forward(down.forward(enc), temb);
    mid = rb_mid.forward(mid, temb);
    Grid<T> up = up_conv.forward(nn::upsample2x_nearest(mid));
    Grid<T> cat(up.h, up.w, 2 * width);
    for (int cell = 0; cell < up.h * up.w; ++cell) {
      for (int ch = 0; ch < width; ++ch) {
        cat.v[size_t(cell) * 2 * width + ch] = up.v[size_t(cell) * width + ch];
        cat.v[size_t(cell) * 2 * width + width + ch] =
            enc.v[size_t(cell) * width + ch];
      }
    }
    Grid<T> dec = rb_dec.forward(cat, temb);
    return conv_out.forward(act_out.forward(gn_out.forward(dec)));
  }

  // Backward from d(eps_hat); accumulates parameter gradients and returns the
  // gradient w.r.t. the condition features (the only differentiable input).
  Grid<T> backward(const Grid<T>& deps) {
    MatX<T> dtemb = MatX<T>::Zero(1, temb_dim);
    Grid<T> ddec = gn_out.backward(act_out.backward(conv_out.backward(deps)));
    Grid<T> dcat = rb_dec.backward(ddec, dtemb);
    Grid<T> dup(dcat.h, dcat.w, width);
    Grid<T> dskip(dcat.h, dcat.w, width);
    for (int cell = 0; cell < dcat.h * dcat.w; ++cell)
      for (int ch = 0; ch < width; ++ch) {
        dup.v[size_t(cell) * width + ch] = dcat.v[size_t(cell) * 2 * width + ch];
        dskip.v[size_t(cell) * width + ch] =
            dcat.v[size_t(cell) * 2 * width + width + ch];
      }
    Grid<T> dmid = nn::upsample2x_nearest_backward(up_conv.backward(dup));
    dmid = rb_mid.backward(dmid, dtemb);
    Grid<T> denc = down.backward(rb_bottom.backward(dmid, dtemb));
    for (size_t i = 0; i < denc.v.size(); ++i) denc.v[i] += dskip.v[i];
    Grid<T> dh = rb_enc.backward(denc, dtemb);
    Grid<T> dinput = conv_in.backward(dh);

    // Time-embedding MLP backward.
    MatX<T> dt1 = temb_fc2.backward(dtemb);
    Grid<T> dtg(1, 1, temb_dim);
    for (int i = 0; i < temb_dim; ++i) dtg.v[i] = dt1(0, i);
    Grid<T> dta = temb_act_.backward(dtg);
    MatX<T> dt0(1, temb_dim);
    for (int i = 0; i < temb_dim; ++i) dt0(0, i) = dta.v[i];
    temb_fc1.backward(dt0);

    Grid<T> dcond(dinput.h, dinput.w, cond_c);
    for (int y = 0; y < dinput.h; ++y)
      for (int x = 0; x < dinput.w; ++x)
        for (int ch = 0; ch < cond_c; ++ch)
          dcond.at(y, x, ch) = dinput.at(y, x, latent_c + ch);
    return dcond;
  }
};

// ---------------------------------------------------------------------------
// Loss evaluation (Eq.-10 shape: unweighted sum of the denoising MSE and the
// background reconstruction term).
// ---------------------------------------------------------------------------

struct LossComponents {
  double total = 0;
  double l_diff = 0;
  double l_bgrec = 0;
};

template <typename T>
struct DiffusionBatchItem {
  const Grid<T>* z0 = nullptr;
  const Grid<T>* cond_features = nullptr;
  const Mask* cond_mask = nullptr;
  const Grid<T>* z_rec = nullptr;  // null when RCEM is off
  int t = 1;
  const Grid<T>* eps = nullptr;
};

template <typename T>
double mse(const Grid<T>& a, const Grid<T>& b) {
  double sum = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const double d = double(a.v[i]) - double(b.v[i]);
    sum += d * d;
  }
  return sum / double(a.v.size());
}

// Forward-only loss evaluation; the training loop re-derives the same values
// with gradients.
template <typename T>
LossComponents total_loss(const std::vector<DiffusionBatchItem<T>>& batch,
                          UNet<T>& denoiser, const NoiseSchedule& ns) {
  if (batch.empty()) throw DataError("total_loss: empty batch");
  LossComponents out;
  for (const auto& item : batch) {
    Grid<T> zt = forward_noise(*item.z0, item.t, *item.eps, ns);
    Grid<T> eps_hat =
        denoiser.forward(zt, *item.cond_features, *item.cond_mask, item.t);
    out.l_diff += mse(eps_hat, *item.eps);
    if (item.z_rec)
      out.l_bgrec += bgrec_loss(*item.z_rec, *item.z0, *item.cond_mask);
  }
  out.l_diff /= double(batch.size());
  out.l_bgrec /= double(batch.size());
  out.total = out.l_diff + out.l_bgrec;
  return out;
}

// ---------------------------------------------------------------------------
// Ancestral sampling over an evenly-strided subsequence of the training
// schedule. The condition is computed once by the caller and stays fixed for
// every step; the denoise callable closes over it.
// ---------------------------------------------------------------------------

inline std::vector<int> sample_timesteps(int T, int steps) {
  std::vector<int> taus;
  for (int i = 0; i < steps; ++i) {
    int t = int(std::lround(double(i + 1) * T / steps));
    t = std::max(1, std::min(T, t));
    if (taus.empty() || t > taus.back()) taus.push_back(t);
  }
  return taus;  // ascending, last element == T
}

template <typename T, typename DenoiseFn>
Grid<T> ancestral_sample(const NoiseSchedule& ns, int sample_steps, int h,
                         int w, int c, Rng& rng, DenoiseFn&& denoise,
                         double x0_clip = 4.0) {
  const std::vector<int> taus = sample_timesteps(ns.steps, sample_steps);
  Grid<T> z(h, w, c);
  for (auto& v : z.v) v = T(rng.normal());
  for (int i = int(taus.size()) - 1; i >= 0; --i) {
    const int t = taus[i];
    const int t_prev = i > 0 ? taus[i - 1] : 0;
    const double ab_t = ns.alpha_bar[t];
    const double ab_prev = ns.alpha_bar[t_prev];
    Grid<T> eps_hat = denoise(z, t);

    const double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
    const double noise_coef = std::sqrt(1.0 - ab_t);
    const double alpha_eff = ab_t / ab_prev;
    const double beta_eff = 1.0 - alpha_eff;
    const double mean_x0 = std::sqrt(ab_prev) * beta_eff / (1.0 - ab_t);
    const double mean_zt = std::sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t);
    const double var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t);
    const double sigma = i > 0 ? std::sqrt(var) : 0.0;

    for (size_t j = 0; j < z.v.size(); ++j) {
      double x0 = (double(z.v[j]) - noise_coef * double(eps_hat.v[j])) * inv_sqrt_ab;
      x0 = clamp(x0, -x0_clip, x0_clip);
      double mean = mean_x0 * x0 + mean_zt * double(z.v[j]);
      z.v[j] = T(mean + sigma * (sigma > 0.0 ? rng.normal() : 0.0));
    }
  }
  return z;
}

}  // namespace lakered
