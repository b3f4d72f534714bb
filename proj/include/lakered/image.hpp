#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "lakered/common.hpp"
#include "lakered/grid.hpp"

namespace lakered {

// 8-bit image, the on-disk and compositing representation. Foreground
// preservation guarantees are stated at 8-bit precision, so paste-back
// operates here rather than in float space.
struct ImageU8 {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> v;

  ImageU8() = default;
  ImageU8(int h_, int w_, int c_, uint8_t fill = 0)
      : h(h_), w(w_), c(c_), v(size_t(h_) * w_ * c_, fill) {}

  uint8_t& at(int y, int x, int ch) { return v[(size_t(y) * w + x) * c + ch]; }
  uint8_t at(int y, int x, int ch) const {
    return v[(size_t(y) * w + x) * c + ch];
  }
};

inline GridF to_float(const ImageU8& img) {
  GridF out(img.h, img.w, img.c);
  for (size_t i = 0; i < img.v.size(); ++i) out.v[i] = float(img.v[i]) / 255.0f;
  return out;
}

inline ImageU8 to_u8(const GridF& img) {
  ImageU8 out(img.h, img.w, img.c);
  for (size_t i = 0; i < img.v.size(); ++i) {
    float x = clamp(img.v[i], 0.0f, 1.0f);
    out.v[i] = uint8_t(std::lround(x * 255.0f));
  }
  return out;
}

// Bilinear resize with half-pixel centers; used for images. Mask resizing
// goes through resize_nearest + binarize instead.
inline GridF resize_bilinear(const GridF& src, int oh, int ow) {
  GridF out(oh, ow, src.c);
  const float sy = float(src.h) / float(oh);
  const float sx = float(src.w) / float(ow);
  for (int y = 0; y < oh; ++y) {
    float fy = (y + 0.5f) * sy - 0.5f;
    int y0 = int(std::floor(fy));
    float wy = fy - y0;
    int y0c = clamp(y0, 0, src.h - 1);
    int y1c = clamp(y0 + 1, 0, src.h - 1);
    for (int x = 0; x < ow; ++x) {
      float fx = (x + 0.5f) * sx - 0.5f;
      int x0 = int(std::floor(fx));
      float wx = fx - x0;
      int x0c = clamp(x0, 0, src.w - 1);
      int x1c = clamp(x0 + 1, 0, src.w - 1);
      for (int ch = 0; ch < src.c; ++ch) {
        float top = src.at(y0c, x0c, ch) * (1 - wx) + src.at(y0c, x1c, ch) * wx;
        float bot = src.at(y1c, x0c, ch) * (1 - wx) + src.at(y1c, x1c, ch) * wx;
        out.at(y, x, ch) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

inline GridF resize_nearest(const GridF& src, int oh, int ow) {
  GridF out(oh, ow, src.c);
  for (int y = 0; y < oh; ++y) {
    int sy = std::min(int((y + 0.5f) * src.h / oh), src.h - 1);
    for (int x = 0; x < ow; ++x) {
      int sx = std::min(int((x + 0.5f) * src.w / ow), src.w - 1);
      for (int ch = 0; ch < src.c; ++ch) out.at(y, x, ch) = src.at(sy, sx, ch);
    }
  }
  return out;
}

struct MaskStats {
  size_t foreground = 0;  // cells with value 0 (object)
  size_t background = 0;  // cells with value 1 (editable)
};

inline MaskStats mask_stats(const Mask& m) {
  MaskStats s;
  for (uint8_t b : m.v) (b == 0 ? s.foreground : s.background)++;
  return s;
}

inline void require_nondegenerate(const Mask& m, const std::string& what) {
  const MaskStats s = mask_stats(m);
  if (s.foreground == 0)
    throw DataError("degenerate mask: no foreground (" + what + ")");
  if (s.background == 0)
    throw DataError("degenerate mask: no background (" + what + ")");
}

// Latent-resolution mask per condition construction: each f x f block votes,
// output cell is 1 iff at least half the block is background (ties go to 1,
// biasing toward editable).
inline Mask downsample_mask(const Mask& m, int f) {
  if (f < 1) throw DataError("downsample factor must be >= 1");
  if (m.h % f != 0 || m.w % f != 0)
    throw DataError("mask dims not divisible by factor " + std::to_string(f));
  Mask out(m.h / f, m.w / f);
  const int block = f * f;
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      int ones = 0;
      for (int dy = 0; dy < f; ++dy)
        for (int dx = 0; dx < f; ++dx) ones += m.at(y * f + dy, x * f + dx);
      out.at(y, x) = (2 * ones >= block) ? 1 : 0;
    }
  return out;
}

// Exact per-pixel selection at 8 bits: source where mask=0, generated where
// mask=1. This is what makes the foreground annotation of a composited image
// bitwise-trustworthy.
inline ImageU8 composite_paste_back(const ImageU8& source,
                                    const ImageU8& generated, const Mask& mask) {
  if (source.h != generated.h || source.w != generated.w ||
      source.c != generated.c || source.h != mask.h || source.w != mask.w)
    throw DataError("composite_paste_back: dimension mismatch");
  ImageU8 out = source;
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      if (mask.at(y, x))
        for (int ch = 0; ch < source.c; ++ch)
          out.at(y, x, ch) = generated.at(y, x, ch);
  return out;
}

inline GridF composite_paste_back(const GridF& source, const GridF& generated,
                                  const Mask& mask) {
  if (!source.same_shape(generated) || source.h != mask.h || source.w != mask.w)
    throw DataError("composite_paste_back: dimension mismatch");
  GridF out = source;
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      if (mask.at(y, x))
        for (int ch = 0; ch < source.c; ++ch)
          out.at(y, x, ch) = generated.at(y, x, ch);
  return out;
}

// Zero out the editable background, keeping object pixels: I_known = x ⊙ m̄.
inline GridF mask_known_region(const GridF& img, const Mask& m) {
  if (img.h != m.h || img.w != m.w)
    throw DataError("mask_known_region: dimension mismatch");
  GridF out = img;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x))
        for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = 0.0f;
  return out;
}

// True when the border pixels are majority-object (value 0). Datasets with
// the opposite mask convention show this; ingestion flips only when asked.
inline bool border_majority_is_object(const Mask& m) {
  size_t zeros = 0, total = 0;
  auto visit = [&](int y, int x) {
    total++;
    zeros += (m.at(y, x) == 0);
  };
  for (int x = 0; x < m.w; ++x) {
    visit(0, x);
    if (m.h > 1) visit(m.h - 1, x);
  }
  for (int y = 1; y + 1 < m.h; ++y) {
    visit(y, 0);
    if (m.w > 1) visit(y, m.w - 1);
  }
  return 2 * zeros > total;
}

inline Mask invert_mask(const Mask& m) {
  Mask out = m;
  for (auto& b : out.v) b = b ? 0 : 1;
  return out;
}

}  // namespace lakered
