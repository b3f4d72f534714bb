#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <vector>

#include "lakered/grid.hpp"
#include "lakered/image.hpp"
#include "lakered/rng.hpp"

namespace lakered {

struct SuperpixelCenter {
  double y = 0, x = 0;          // spatial centroid
  std::vector<double> feat;     // feature centroid
  int cells = 0;
};

// Foreground partition at latent resolution. Background cells carry -1,
// foreground cells a label in [0, count).
struct SuperpixelMap {
  int h = 0, w = 0;
  int count = 0;  // s'
  std::vector<int> labels;
  std::vector<SuperpixelCenter> centers;

  int label_at(int y, int x) const { return labels[size_t(y) * w + x]; }
  int& label_at(int y, int x) { return labels[size_t(y) * w + x]; }
};

namespace detail {

template <typename T>
void recompute_centers(SuperpixelMap& map, const Grid<T>& features) {
  map.centers.assign(size_t(map.count), SuperpixelCenter{});
  for (auto& c : map.centers) c.feat.assign(size_t(features.c), 0.0);
  for (int y = 0; y < map.h; ++y)
    for (int x = 0; x < map.w; ++x) {
      const int l = map.label_at(y, x);
      if (l < 0) continue;
      auto& c = map.centers[l];
      c.y += y;
      c.x += x;
      c.cells += 1;
      for (int ch = 0; ch < features.c; ++ch)
        c.feat[ch] += double(features.at(y, x, ch));
    }
  for (auto& c : map.centers)
    if (c.cells > 0) {
      c.y /= c.cells;
      c.x /= c.cells;
      for (auto& f : c.feat) f /= c.cells;
    }
}

// Drop empty labels, renumber the rest preserving order.
inline void compact_labels(SuperpixelMap& map) {
  std::vector<int> counts(size_t(std::max(map.count, 1)), 0);
  for (int l : map.labels)
    if (l >= 0) counts[l]++;
  std::vector<int> remap(counts.size(), -1);
  int next = 0;
  for (size_t i = 0; i < counts.size(); ++i)
    if (counts[i] > 0) remap[i] = next++;
  for (auto& l : map.labels)
    if (l >= 0) l = remap[l];
  map.count = next;
}

struct Component {
  int label = 0;
  std::vector<int> cells;  // linear indices, ascending discovery order
};

inline std::vector<Component> connected_components(const SuperpixelMap& map) {
  std::vector<Component> comps;
  std::vector<char> seen(map.labels.size(), 0);
  for (int y = 0; y < map.h; ++y)
    for (int x = 0; x < map.w; ++x) {
      const int idx = y * map.w + x;
      if (seen[idx] || map.labels[idx] < 0) continue;
      Component comp;
      comp.label = map.labels[idx];
      std::deque<int> queue{idx};
      seen[idx] = 1;
      while (!queue.empty()) {
        const int cur = queue.front();
        queue.pop_front();
        comp.cells.push_back(cur);
        const int cy = cur / map.w, cx = cur % map.w;
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
          const int ny = cy + dy[d], nx = cx + dx[d];
          if (ny < 0 || ny >= map.h || nx < 0 || nx >= map.w) continue;
          const int nidx = ny * map.w + nx;
          if (!seen[nidx] && map.labels[nidx] == comp.label) {
            seen[nidx] = 1;
            queue.push_back(nidx);
          }
        }
      }
      comps.push_back(std::move(comp));
    }
  return comps;
}

}  // namespace detail

// Standard SLIC connectivity post-process, restricted to the foreground
// domain. Non-largest islands of a label, and labels smaller than min_size,
// are merged into the 4-adjacent label with the nearest feature centroid
// (ties to the lowest label). Islands with no labeled neighbour (disconnected
// foreground) become labels of their own so that every label stays
// 4-connected.
template <typename T>
SuperpixelMap enforce_connectivity(SuperpixelMap map, const Grid<T>& features,
                                   int min_size) {
  min_size = std::max(min_size, 1);
  for (int pass = 0; pass < 4 * std::max(map.count, 1) + 8; ++pass) {
    auto comps = detail::connected_components(map);

    // Pick the component each label keeps: largest, ties to first discovered.
    std::vector<int> keep(size_t(std::max(map.count, 1)), -1);
    for (size_t ci = 0; ci < comps.size(); ++ci) {
      const int l = comps[ci].label;
      if (keep[l] < 0 || comps[ci].cells.size() > comps[keep[l]].cells.size())
        keep[l] = int(ci);
    }

    bool changed = false;
    for (size_t ci = 0; ci < comps.size(); ++ci) {
      const auto& comp = comps[ci];
      const bool is_kept = keep[comp.label] == int(ci);
      if (is_kept && int(comp.cells.size()) >= min_size) continue;
      // A kept-but-small component only merges if it has a neighbour label;
      // otherwise it stays (it is the whole of a small isolated region).
      std::vector<double> frag_feat(size_t(features.c), 0.0);
      for (int idx : comp.cells)
        for (int ch = 0; ch < features.c; ++ch)
          frag_feat[ch] += double(features.v[size_t(idx) * features.c + ch]);
      for (auto& f : frag_feat) f /= double(comp.cells.size());

      // Candidate adjacent labels from the current grid.
      std::vector<int> adjacent;
      for (int idx : comp.cells) {
        const int cy = idx / map.w, cx = idx % map.w;
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
          const int ny = cy + dy[d], nx = cx + dx[d];
          if (ny < 0 || ny >= map.h || nx < 0 || nx >= map.w) continue;
          const int nl = map.label_at(ny, nx);
          if (nl >= 0 && nl != comp.label) adjacent.push_back(nl);
        }
      }
      std::sort(adjacent.begin(), adjacent.end());
      adjacent.erase(std::unique(adjacent.begin(), adjacent.end()),
                     adjacent.end());

      if (adjacent.empty()) {
        if (!is_kept) {
          // Orphan island: give it a fresh label to restore connectivity.
          for (int idx : comp.cells) map.labels[idx] = map.count;
          map.count += 1;
          changed = true;
        }
        continue;
      }

      // Feature centroids of candidate labels over current assignment.
      int best = -1;
      double best_dist = 0;
      for (int cand : adjacent) {
        std::vector<double> cand_feat(size_t(features.c), 0.0);
        int cand_cells = 0;
        for (size_t i = 0; i < map.labels.size(); ++i)
          if (map.labels[i] == cand) {
            ++cand_cells;
            for (int ch = 0; ch < features.c; ++ch)
              cand_feat[ch] += double(features.v[i * features.c + ch]);
          }
        double dist = 0;
        for (int ch = 0; ch < features.c; ++ch) {
          const double d = cand_feat[ch] / std::max(cand_cells, 1) - frag_feat[ch];
          dist += d * d;
        }
        if (best < 0 || dist < best_dist) {
          best = cand;
          best_dist = dist;
        }
      }
      for (int idx : comp.cells) map.labels[idx] = best;
      changed = true;
    }
    if (!changed) break;
  }
  detail::compact_labels(map);
  detail::recompute_centers(map, features);
  return map;
}

// SLIC clustering restricted to foreground cells (latent_mask == 0).
// Joint distance sqrt(d_feat^2 + (d_xy/S)^2 * compactness^2) with
// S = sqrt(|foreground| / s). Deterministic for fixed inputs and seed.
// objective_trace, when given, receives the total squared joint distance
// after each assignment step.
template <typename T>
SuperpixelMap slic_foreground(const Grid<T>& features, const Mask& latent_mask,
                              int s, double compactness, int iterations,
                              uint64_t seed,
                              std::vector<double>* objective_trace = nullptr) {
  if (features.h != latent_mask.h || features.w != latent_mask.w)
    throw DataError("slic: feature/mask size mismatch");
  if (s < 1 || iterations < 1) throw DataError("slic: s and iterations must be >= 1");

  std::vector<int> fg_cells;
  for (int y = 0; y < latent_mask.h; ++y)
    for (int x = 0; x < latent_mask.w; ++x)
      if (latent_mask.at(y, x) == 0) fg_cells.push_back(y * latent_mask.w + x);
  if (fg_cells.empty()) throw DataError("slic: empty foreground");

  const int n_fg = int(fg_cells.size());
  const int s_eff = std::min(s, n_fg);
  const double S = std::sqrt(double(n_fg) / double(s_eff));
  const double spatial_scale = compactness / S;

  SuperpixelMap map;
  map.h = features.h;
  map.w = features.w;
  map.count = s_eff;
  map.labels.assign(size_t(map.h) * map.w, -1);

  // Regular grid seeds over the full domain, snapped to unclaimed foreground
  // cells. A small seeded jitter keeps distinct seeds distinguishable without
  // affecting determinism for a fixed seed.
  Rng rng(seed);
  const int ny = std::max(1, int(std::lround(std::sqrt(
                       double(s_eff) * map.h / std::max(1, map.w)))));
  const int nx = (s_eff + ny - 1) / ny;
  std::vector<char> claimed(size_t(map.h) * map.w, 0);
  map.centers.assign(size_t(s_eff), SuperpixelCenter{});
  int placed = 0;
  for (int gy = 0; gy < ny && placed < s_eff; ++gy)
    for (int gx = 0; gx < nx && placed < s_eff; ++gx) {
      const double py =
          (gy + 0.5) * map.h / ny + (rng.uniform() - 0.5) * 0.5;
      const double px =
          (gx + 0.5) * map.w / nx + (rng.uniform() - 0.5) * 0.5;
      int best = -1;
      double best_d = 0;
      for (int idx : fg_cells) {
        if (claimed[idx]) continue;
        const double dy = idx / map.w - py, dx = idx % map.w - px;
        const double d = dy * dy + dx * dx;
        if (best < 0 || d < best_d) {
          best = idx;
          best_d = d;
        }
      }
      auto& c = map.centers[placed++];
      c.y = best / map.w;
      c.x = best % map.w;
      c.feat.assign(size_t(features.c), 0.0);
      for (int ch = 0; ch < features.c; ++ch)
        c.feat[ch] =
            double(features.v[size_t(best) * features.c + ch]);
      claimed[best] = 1;
    }

  for (int iter = 0; iter < iterations; ++iter) {
    // Assignment: full nearest-center search over foreground cells.
    double objective = 0;
    for (int idx : fg_cells) {
      const int cy = idx / map.w, cx = idx % map.w;
      int best = -1;
      double best_d = 0;
      for (int l = 0; l < map.count; ++l) {
        const auto& c = map.centers[l];
        double d_feat2 = 0;
        for (int ch = 0; ch < features.c; ++ch) {
          const double d =
              double(features.v[size_t(idx) * features.c + ch]) - c.feat[ch];
          d_feat2 += d * d;
        }
        const double dy = (cy - c.y) * spatial_scale;
        const double dx = (cx - c.x) * spatial_scale;
        const double d = d_feat2 + dy * dy + dx * dx;
        if (best < 0 || d < best_d) {
          best = l;
          best_d = d;
        }
      }
      map.labels[idx] = best;
      objective += best_d;
    }
    if (objective_trace) objective_trace->push_back(objective);

    // Update: centroids over assigned cells; empty labels keep their center.
    std::vector<SuperpixelCenter> next(map.centers);
    for (auto& c : next) {
      c.cells = 0;
      c.y = 0;
      c.x = 0;
      std::fill(c.feat.begin(), c.feat.end(), 0.0);
    }
    for (int idx : fg_cells) {
      auto& c = next[map.labels[idx]];
      c.cells += 1;
      c.y += idx / map.w;
      c.x += idx % map.w;
      for (int ch = 0; ch < features.c; ++ch)
        c.feat[ch] += double(features.v[size_t(idx) * features.c + ch]);
    }
    for (int l = 0; l < map.count; ++l) {
      if (next[l].cells == 0) {
        next[l] = map.centers[l];
        next[l].cells = 0;
        continue;
      }
      next[l].y /= next[l].cells;
      next[l].x /= next[l].cells;
      for (auto& f : next[l].feat) f /= next[l].cells;
    }
    map.centers = std::move(next);
  }

  detail::compact_labels(map);
  detail::recompute_centers(map, features);
  return map;
}

// Pipeline entry point: SLIC followed by the standard connectivity cleanup
// with min_size = |foreground| / (4s).
template <typename T>
SuperpixelMap compute_superpixels(const Grid<T>& features,
                                  const Mask& latent_mask, int s,
                                  double compactness, int iterations,
                                  uint64_t seed) {
  SuperpixelMap map =
      slic_foreground(features, latent_mask, s, compactness, iterations, seed);
  const int n_fg = int(latent_mask.foreground_count());
  return enforce_connectivity(std::move(map), features,
                              std::max(1, n_fg / (4 * std::max(s, 1))));
}

}  // namespace lakered
