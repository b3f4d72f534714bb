#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lakered/grid.hpp"
#include "lakered/nn.hpp"

namespace lakered {

template <typename T>
struct QuantizationResult {
  std::vector<int> indices;  // h*w, values in [0, K)
  Grid<T> quantized;
};

struct VqLossTerms {
  double total = 0;
  double reconstruction = 0;
  double codebook = 0;
  double commitment = 0;
};

// Reconstruction + codebook + beta * commitment, all mean-reduced.
// Zero exactly when the reconstruction matches the image and the pre-quant
// latent already sits on its codebook entry.
template <typename T>
VqLossTerms vqvae_loss(const Grid<T>& image, const Grid<T>& reconstruction,
                       const Grid<T>& pre_quant, const Grid<T>& quantized,
                       double beta) {
  if (!image.same_shape(reconstruction) || !pre_quant.same_shape(quantized))
    throw DataError("vqvae_loss: shape mismatch");
  VqLossTerms out;
  for (size_t i = 0; i < image.v.size(); ++i) {
    const double d = double(reconstruction.v[i]) - double(image.v[i]);
    out.reconstruction += d * d;
  }
  out.reconstruction /= double(image.v.size());
  for (size_t i = 0; i < pre_quant.v.size(); ++i) {
    const double d = double(quantized.v[i]) - double(pre_quant.v[i]);
    out.codebook += d * d;
  }
  out.codebook /= double(pre_quant.v.size());
  out.commitment = beta * out.codebook;
  out.total = out.reconstruction + out.codebook + out.commitment;
  return out;
}

// Convolutional VQ-VAE with downsample factor f = 2^n and a D-dimensional
// codebook that doubles as the retrieval memory. Channel count of the latent
// stays at 3.
template <typename T>
struct VQVAE {
  int f = 4, K = 512, D = 3, width = 16;
  int stages = 2;  // log2(f)

  nn::Conv2d<T> enc_in, enc_mid, enc_out;
  std::vector<nn::Conv2d<T>> enc_down;
  nn::Conv2d<T> dec_in, dec_mid, dec_out;
  std::vector<nn::Conv2d<T>> dec_up;
  nn::Param<T> codebook;  // (K, D)

  std::vector<nn::SiLU<T>> enc_act, dec_act;

  void init(int f_, int K_, int D_, int width_, Rng& rng) {
    f = f_;
    K = K_;
    D = D_;
    width = width_;
    stages = 0;
    for (int v = f; v > 1; v /= 2) ++stages;

    auto stage_width = [&](int i) {  // width after i downsamples
      return i == 0 ? width : 2 * width;
    };

    enc_in.init("vqvae.enc_in", 3, width, 3, 1, rng);
    enc_down.resize(stages);
    for (int i = 0; i < stages; ++i)
      enc_down[i].init("vqvae.enc_down" + std::to_string(i), stage_width(i),
                       stage_width(i + 1), 3, 2, rng);
    enc_mid.init("vqvae.enc_mid", stage_width(stages), stage_width(stages), 3,
                 1, rng);
    enc_out.init("vqvae.enc_out", stage_width(stages), D, 3, 1, rng);

    dec_in.init("vqvae.dec_in", D, stage_width(stages), 3, 1, rng);
    dec_mid.init("vqvae.dec_mid", stage_width(stages), stage_width(stages), 3,
                 1, rng);
    dec_up.resize(stages);
    for (int i = 0; i < stages; ++i)
      dec_up[i].init("vqvae.dec_up" + std::to_string(i),
                     stage_width(stages - i), stage_width(stages - i - 1), 3, 1,
                     rng);
    dec_out.init("vqvae.dec_out", width, 3, 3, 1, rng);

    codebook.resize("vqvae.codebook", {K, D});
    nn::init_normal(codebook, rng, 0.5);

    enc_act.assign(size_t(stages) + 2, {});
    dec_act.assign(size_t(stages) + 2, {});
  }

  void collect(nn::ParamSet<T>& ps, bool include_codebook = true) {
    enc_in.collect(ps);
    for (auto& l : enc_down) l.collect(ps);
    enc_mid.collect(ps);
    enc_out.collect(ps);
    dec_in.collect(ps);
    dec_mid.collect(ps);
    for (auto& l : dec_up) l.collect(ps);
    dec_out.collect(ps);
    if (include_codebook) ps.add(codebook);
  }

  // image (H,W,3) -> pre-quant latent (H/f, W/f, D)
  Grid<T> encode(const Grid<T>& image) {
    if (image.h % f != 0 || image.w % f != 0)
      throw DataError("encode: image dims not divisible by latent factor");
    Grid<T> h = enc_act[0].forward(enc_in.forward(image));
    for (int i = 0; i < stages; ++i)
      h = enc_act[i + 1].forward(enc_down[i].forward(h));
    h = enc_act[stages + 1].forward(enc_mid.forward(h));
    return enc_out.forward(h);
  }

  void encode_backward(const Grid<T>& dz) {
    Grid<T> g = enc_mid.backward(enc_act[stages + 1].backward(enc_out.backward(dz)));
    for (int i = stages - 1; i >= 0; --i)
      g = enc_down[i].backward(enc_act[i + 1].backward(g));
    enc_in.backward(enc_act[0].backward(g));
  }

  // Nearest codebook entry per cell, squared Euclidean, ties to the lowest
  // index.
  QuantizationResult<T> quantize(const Grid<T>& latent) const {
    if (latent.c != D) throw DataError("quantize: latent channel dim != D");
    QuantizationResult<T> out;
    out.indices.assign(size_t(latent.h) * latent.w, 0);
    out.quantized = Grid<T>(latent.h, latent.w, D);
    for (int cell = 0; cell < latent.h * latent.w; ++cell) {
      const T* z = latent.v.data() + size_t(cell) * D;
      int best = 0;
      double best_d = 0;
      for (int k = 0; k < K; ++k) {
        double d = 0;
        const T* e = codebook.w.data() + size_t(k) * D;
        for (int ch = 0; ch < D; ++ch) {
          const double diff = double(z[ch]) - double(e[ch]);
          d += diff * diff;
        }
        if (k == 0 || d < best_d) {
          best = k;
          best_d = d;
        }
      }
      out.indices[cell] = best;
      T* q = out.quantized.v.data() + size_t(cell) * D;
      const T* e = codebook.w.data() + size_t(best) * D;
      for (int ch = 0; ch < D; ++ch) q[ch] = e[ch];
    }
    return out;
  }

  // latent (h,w,D) through the decoder stack; no quantization, no clamping.
  Grid<T> run_decoder(const Grid<T>& latent) {
    Grid<T> h = dec_act[0].forward(dec_in.forward(latent));
    h = dec_act[1].forward(dec_mid.forward(h));
    for (int i = 0; i < stages; ++i)
      h = dec_act[i + 2].forward(dec_up[i].forward(nn::upsample2x_nearest(h)));
    return dec_out.forward(h);
  }

  Grid<T> run_decoder_backward(const Grid<T>& drecon) {
    Grid<T> g = dec_out.backward(drecon);
    for (int i = stages - 1; i >= 0; --i)
      g = nn::upsample2x_nearest_backward(
          dec_up[i].backward(dec_act[i + 2].backward(g)));
    g = dec_mid.backward(dec_act[1].backward(g));
    return dec_in.backward(dec_act[0].backward(g));
  }

  // Public decode: embed codebook entries via the quantization layer, then
  // decode and clamp to [0,1].
  Grid<T> decode(const Grid<T>& latent) {
    Grid<T> out = run_decoder(quantize(latent).quantized);
    for (auto& v : out.v) v = clamp(v, T(0), T(1));
    return out;
  }

  size_t param_count() {
    nn::ParamSet<T> ps;
    collect(ps);
    return ps.total_count();
  }
};

// Snapshot of the codebook as K retrieval tokens of dimension D; frozen by
// copy, later codebook updates do not affect it.
template <typename T>
MatX<T> export_global_embedding(const nn::Param<T>& codebook) {
  const int K = codebook.shape.at(0), D = codebook.shape.at(1);
  MatX<T> out(K, D);
  for (int k = 0; k < K; ++k)
    for (int d = 0; d < D; ++d) out(k, d) = codebook.w[size_t(k) * D + d];
  return out;
}

template <typename T>
MatX<T> export_global_embedding(const VQVAE<T>& model) {
  return export_global_embedding(model.codebook);
}

}  // namespace lakered
