#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "lakered/image.hpp"
#include "lakered/png_io.hpp"
#include "lakered/rng.hpp"

namespace lakered {

namespace fs = std::filesystem;

// Source image, its object mask and identity. Image values live in [0,1],
// mask follows the 0=object / 1=background convention.
struct CamoPair {
  GridF image;
  Mask mask;
  std::string id;
};

struct ManifestEntry {
  std::string id;
  std::string split;  // "train" or "test"
};

struct DatasetManifest {
  fs::path root;
  std::vector<ManifestEntry> entries;

  fs::path image_path(const std::string& id) const {
    return root / "images" / (id + ".png");
  }
  fs::path mask_path(const std::string& id) const {
    return root / "masks" / (id + ".png");
  }
  std::vector<ManifestEntry> split(const std::string& tag) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == tag) out.push_back(e);
    return out;
  }
};

struct LoadOptions {
  int target_height = 64;
  int target_width = 64;
  // Flip masks whose border majority is object-valued. Off by default:
  // predictability over convenience.
  bool flip_border_masks = false;
};

inline CamoPair load_pair(const std::string& image_path,
                          const std::string& mask_path,
                          const LoadOptions& opt, std::string id = "") {
  ImageU8 raw_img = read_png(image_path);
  ImageU8 raw_mask = read_png(mask_path);
  if (raw_mask.c != 1)
    throw DataError("mask is not single-channel: " + mask_path);
  if (raw_img.c == 1) {
    ImageU8 rgb(raw_img.h, raw_img.w, 3);
    for (int y = 0; y < raw_img.h; ++y)
      for (int x = 0; x < raw_img.w; ++x)
        for (int ch = 0; ch < 3; ++ch) rgb.at(y, x, ch) = raw_img.at(y, x, 0);
    raw_img = std::move(rgb);
  }
  if (raw_img.c != 3) throw DataError("image is not RGB: " + image_path);
  if (raw_img.h != raw_mask.h || raw_img.w != raw_mask.w)
    throw DataError("image/mask size mismatch: " + image_path);

  CamoPair pair;
  pair.id = id.empty() ? fs::path(image_path).stem().string() : std::move(id);
  pair.image = resize_bilinear(to_float(raw_img), opt.target_height,
                               opt.target_width);
  for (auto& x : pair.image.v) x = clamp(x, 0.0f, 1.0f);

  GridF mf(raw_mask.h, raw_mask.w, 1);
  for (size_t i = 0; i < raw_mask.v.size(); ++i) mf.v[i] = float(raw_mask.v[i]);
  GridF mr = resize_nearest(mf, opt.target_height, opt.target_width);
  pair.mask = Mask(opt.target_height, opt.target_width);
  for (size_t i = 0; i < pair.mask.v.size(); ++i)
    pair.mask.v[i] = mr.v[i] >= 127.5f ? 1 : 0;

  if (opt.flip_border_masks && border_majority_is_object(pair.mask))
    pair.mask = invert_mask(pair.mask);
  require_nondegenerate(pair.mask, pair.id);
  return pair;
}

inline CamoPair load_pair(const DatasetManifest& m, const ManifestEntry& e,
                          const LoadOptions& opt) {
  return load_pair(m.image_path(e.id).string(), m.mask_path(e.id).string(), opt,
                   e.id);
}

inline DatasetManifest load_manifest(const fs::path& root) {
  DatasetManifest m;
  m.root = root;
  const fs::path mf = root / "manifest.txt";
  std::ifstream in(mf);
  if (!in) throw DataError("cannot open manifest: " + mf.string());
  std::string line;
  std::set<std::string> ids;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.id >> e.split) || (e.split != "train" && e.split != "test"))
      throw DataError("bad manifest record at line " + std::to_string(lineno));
    if (!ids.insert(e.id).second)
      throw DataError("duplicate id in manifest: " + e.id);
    if (!fs::exists(m.image_path(e.id)))
      throw DataError("missing image file for id " + e.id);
    if (!fs::exists(m.mask_path(e.id)))
      throw DataError("missing mask file for id " + e.id);
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw DataError("empty manifest: " + mf.string());
  return m;
}

inline void save_manifest(const DatasetManifest& m) {
  std::ofstream out(m.root / "manifest.txt");
  for (const auto& e : m.entries) out << e.id << " " << e.split << "\n";
}

// ---------------------------------------------------------------------------
// Toy dataset synthesis: textured images whose object region continues the
// background texture (the background-matching premise), plus blob masks.
// ---------------------------------------------------------------------------

struct ToyDataOptions {
  int count = 2000;
  int size = 64;
  uint64_t seed = 7;
  double train_fraction = 0.85;
  int latent_factor = 4;  // used to reject masks degenerate at latent scale
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, float rgb[3]) {
  h = h - std::floor(h);
  double r = 0, g = 0, b = 0;
  int i = int(h * 6.0);
  double f = h * 6.0 - i;
  double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (i % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    case 5: r = v; g = p; b = q; break;
  }
  rgb[0] = float(r);
  rgb[1] = float(g);
  rgb[2] = float(b);
}

// Smooth value noise: bilinear interpolation of a coarse random lattice.
struct ValueNoise {
  int gh, gw;
  double cell;
  std::vector<double> lattice;

  ValueNoise(int size, double cell_px, Rng& rng) : cell(cell_px) {
    gh = int(size / cell_px) + 2;
    gw = gh;
    lattice.resize(size_t(gh) * gw);
    for (auto& x : lattice) x = rng.uniform();
  }
  double operator()(double y, double x) const {
    double fy = y / cell, fx = x / cell;
    int y0 = int(fy), x0 = int(fx);
    double ty = fy - y0, tx = fx - x0;
    auto at = [&](int yy, int xx) {
      return lattice[size_t(std::min(yy, gh - 1)) * gw + std::min(xx, gw - 1)];
    };
    double a = at(y0, x0) * (1 - tx) + at(y0, x0 + 1) * tx;
    double b = at(y0 + 1, x0) * (1 - tx) + at(y0 + 1, x0 + 1) * tx;
    return a * (1 - ty) + b * ty;
  }
};

inline GridF render_texture(int size, Rng& rng) {
  float color_a[3], color_b[3];
  const double hue = rng.uniform();
  const double sat = rng.uniform(0.35, 0.9);
  hsv_to_rgb(hue, sat, rng.uniform(0.2, 0.45), color_a);
  hsv_to_rgb(hue + rng.uniform(-0.14, 0.14), sat * rng.uniform(0.7, 1.0),
             rng.uniform(0.6, 0.95), color_b);

  const int kind = rng.uniform_int(0, 3);
  const double angle = rng.uniform(0.0, 3.14159265358979);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double wavelength = rng.uniform(6.0, 20.0);
  const double phase = rng.uniform(0.0, 6.28318530717959);
  const double checker_cell = rng.uniform(5.0, 14.0);
  ValueNoise noise(size, rng.uniform(4.0, 12.0), rng);
  const double spot_level = rng.uniform(0.55, 0.7);
  const double grain = 0.02;

  GridF img(size, size, 3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = x * ca + y * sa;
      const double w = -x * sa + y * ca;
      double t = 0.5;
      switch (kind) {
        case 0:  // stripes
          t = 0.5 + 0.5 * std::sin(6.28318530717959 * u / wavelength + phase);
          break;
        case 1: {  // checkerboard
          int cu = int(std::floor(u / checker_cell));
          int cw = int(std::floor(w / checker_cell));
          t = ((cu + cw) & 1) ? 0.15 : 0.85;
          t += 0.25 * (noise(y, x) - 0.5);
          break;
        }
        case 2:  // smooth blobs
          t = noise(y, x);
          t = t * t * (3 - 2 * t);
          break;
        case 3:  // spots
          t = noise(y, x) > spot_level ? 0.9 : 0.12;
          break;
      }
      t = lakered::clamp(t, 0.0, 1.0);
      for (int ch = 0; ch < 3; ++ch) {
        double val = color_a[ch] * (1 - t) + color_b[ch] * t;
        val += grain * (rng.uniform() - 0.5);
        img.at(y, x, ch) = float(lakered::clamp(val, 0.0, 1.0));
      }
    }
  return img;
}

inline Mask render_blob_mask(int size, Rng& rng, double radius_scale) {
  const double cx = size * (0.5 + rng.uniform(-0.1, 0.1));
  const double cy = size * (0.5 + rng.uniform(-0.1, 0.1));
  const double base_r = size * rng.uniform(0.20, 0.34) * radius_scale;
  double amp[4], ph[4];
  for (int k = 0; k < 4; ++k) {
    amp[k] = rng.uniform(0.0, 0.4 / (k + 2));
    ph[k] = rng.uniform(0.0, 6.28318530717959);
  }
  Mask m(size, size, 1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double theta = std::atan2(dy, dx);
      double rho = 1.0;
      for (int k = 0; k < 4; ++k) rho += amp[k] * std::sin((k + 2) * theta + ph[k]);
      if (std::sqrt(dy * dy + dx * dx) < base_r * rho) m.at(y, x) = 0;
    }
  return m;
}

inline bool mask_usable(const Mask& m, int latent_factor) {
  const MaskStats s = mask_stats(m);
  const double frac = double(s.foreground) / double(m.v.size());
  if (frac < 0.06 || frac > 0.45) return false;
  const Mask lm = downsample_mask(m, latent_factor);
  const MaskStats ls = mask_stats(lm);
  return ls.foreground > 0 && ls.background > 0;
}

}  // namespace detail

inline std::string toy_pair_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%05d", index);
  return buf;
}

inline DatasetManifest synth_toy_dataset(const fs::path& root,
                                         const ToyDataOptions& opt) {
  if (opt.count < 2) throw DataError("toy dataset needs at least 2 pairs");
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");

  DatasetManifest m;
  m.root = root;

  // Deterministic split assignment, independent of the per-pair streams.
  std::vector<int> order(opt.count);
  for (int i = 0; i < opt.count; ++i) order[i] = i;
  Rng split_rng = derive_rng(opt.seed, "toy-split");
  for (int i = opt.count - 1; i > 0; --i)
    std::swap(order[i], order[split_rng.uniform_int(0, i)]);
  const int n_train = std::max(1, int(std::lround(opt.count * opt.train_fraction)));
  std::vector<std::string> splits(opt.count, "test");
  for (int i = 0; i < std::min(n_train, opt.count); ++i) splits[order[i]] = "train";

  for (int i = 0; i < opt.count; ++i) {
    const std::string id = toy_pair_id(i);
    Rng rng = derive_rng(opt.seed, "toy:" + id);
    GridF img = detail::render_texture(opt.size, rng);
    Mask mask;
    double scale = 1.0;
    for (int attempt = 0;; ++attempt) {
      mask = detail::render_blob_mask(opt.size, rng, scale);
      if (detail::mask_usable(mask, opt.latent_factor)) break;
      if (attempt > 32) throw DataError("toy mask synthesis failed for " + id);
      scale = mask_stats(mask).foreground * 2 < mask.v.size() ? scale * 1.15
                                                              : scale * 0.85;
    }
    write_png((root / "images" / (id + ".png")).string(), to_u8(img));
    write_mask_png((root / "masks" / (id + ".png")).string(), mask);
    m.entries.push_back({id, splits[i]});
  }
  save_manifest(m);
  return m;
}

}  // namespace lakered
