#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cstdint>
#include <vector>

namespace lakered {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Dense h x w x c grid, row-major with channels last. Used for images at
// pixel resolution and for latent feature grids.
template <typename T>
struct Grid {
  int h = 0, w = 0, c = 0;
  std::vector<T> v;

  Grid() = default;
  Grid(int h_, int w_, int c_, T fill = T(0))
      : h(h_), w(w_), c(c_), v(size_t(h_) * w_ * c_, fill) {}

  T& at(int y, int x, int ch) { return v[(size_t(y) * w + x) * c + ch]; }
  const T& at(int y, int x, int ch) const {
    return v[(size_t(y) * w + x) * c + ch];
  }

  size_t size() const { return v.size(); }
  bool same_shape(const Grid& o) const {
    return h == o.h && w == o.w && c == o.c;
  }

  // View as (h*w) x c matrix; one row per cell.
  Eigen::Map<MatX<T>> cells() { return {v.data(), h * w, c}; }
  Eigen::Map<const MatX<T>> cells() const { return {v.data(), h * w, c}; }

  template <typename U>
  Grid<U> cast() const {
    Grid<U> out(h, w, c);
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = U(v[i]);
    return out;
  }
};

using GridF = Grid<float>;
using GridD = Grid<double>;

// Binary mask; value semantics follow the dataset convention
// (0 = preserved foreground object, 1 = editable background).
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), v(size_t(h_) * w_, fill) {}

  uint8_t& at(int y, int x) { return v[size_t(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[size_t(y) * w + x]; }

  size_t count(uint8_t value) const {
    size_t n = 0;
    for (uint8_t b : v) n += (b == value);
    return n;
  }
  size_t foreground_count() const { return count(0); }
  size_t background_count() const { return count(1); }
};

}  // namespace lakered
