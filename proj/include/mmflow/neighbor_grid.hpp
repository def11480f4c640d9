#ifndef MMFLOW_NEIGHBOR_GRID_HPP
#define MMFLOW_NEIGHBOR_GRID_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "mmflow/geom3d.hpp"

namespace mmflow {

/// Uniform cell grid over a fixed point set. Built once, then read-only.
///
/// Nearest queries break distance ties by lowest index; radius queries return
/// indices in increasing order.
class NeighborGrid {
 public:
  NeighborGrid(std::span<const Vec3> points, double cell_size) : pts_(points.begin(), points.end()) {
    require(cell_size > 0.0, ErrorKind::InvalidArgument, "cell size must be positive");
    if (pts_.empty()) return;
    lo_ = pts_[0];
    Vec3 hi = pts_[0];
    for (const Vec3& p : pts_) {
      lo_ = lo_.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    // Cap the cell count near a few cells per point.
    h_ = cell_size;
    const double max_cells = 8.0 * static_cast<double>(pts_.size()) + 64.0;
    for (;;) {
      for (int a = 0; a < 3; ++a) dims_[a] = static_cast<std::int64_t>(std::floor((hi[a] - lo_[a]) / h_)) + 1;
      if (static_cast<double>(dims_[0]) * dims_[1] * dims_[2] <= max_cells) break;
      h_ *= 1.5;
    }
    start_.assign(dims_[0] * dims_[1] * dims_[2] + 1, 0);
    std::vector<std::int64_t> cell_of(pts_.size());
    for (std::size_t i = 0; i < pts_.size(); ++i) {
      cell_of[i] = flat(cell_coords(pts_[i]));
      ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
    items_.resize(pts_.size());
    std::vector<std::int64_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < pts_.size(); ++i) items_[fill[cell_of[i]]++] = i;  // ascending within a cell
  }

  std::size_t size() const { return pts_.size(); }

  /// Index of the nearest point; ties go to the lowest index. Grid must be nonempty.
  std::size_t nearest(const Vec3& q, double* dist = nullptr) const {
    require(!pts_.empty(), ErrorKind::EmptySet, "nearest query on an empty grid");
    const Cell c = unclamped_cell(q);
    std::int64_t max_ring = 0;
    for (int a = 0; a < 3; ++a)
      max_ring = std::max({max_ring, std::abs(c[a]), std::abs(c[a] - (dims_[a] - 1))});
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_i = 0;
    std::int64_t first_ring = 0;
    for (int a = 0; a < 3; ++a)
      first_ring = std::max({first_ring, -c[a], c[a] - (dims_[a] - 1)});
    for (std::int64_t r = first_ring; r <= max_ring; ++r) {
      visit_ring(c, r, [&](std::size_t i) {
        const double d = (pts_[i] - q).norm();
        if (d < best || (d == best && i < best_i)) {
          best = d;
          best_i = i;
        }
      });
      // Cells in ring r + 1 are at least r * h away from q.
      if (best < static_cast<double>(r) * h_) break;
    }
    if (dist) *dist = best;
    return best_i;
  }

  /// All indices with distance <= radius, ascending.
  std::vector<std::size_t> within(const Vec3& q, double radius) const {
    std::vector<std::size_t> out;
    if (pts_.empty()) return out;
    Cell lo = unclamped_cell(q - Vec3::Constant(radius));
    Cell hi = unclamped_cell(q + Vec3::Constant(radius));
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max<std::int64_t>(lo[a], 0);
      hi[a] = std::min<std::int64_t>(hi[a], dims_[a] - 1);
      if (lo[a] > hi[a]) return out;
    }
    for (std::int64_t x = lo[0]; x <= hi[0]; ++x)
      for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
        for (std::int64_t z = lo[2]; z <= hi[2]; ++z) {
          const std::int64_t f = flat({x, y, z});
          for (std::int64_t k = start_[f]; k < start_[f + 1]; ++k)
            if ((pts_[items_[k]] - q).norm() <= radius) out.push_back(items_[k]);
        }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  using Cell = std::array<std::int64_t, 3>;

  Cell unclamped_cell(const Vec3& p) const {
    Cell c;
    for (int a = 0; a < 3; ++a) {
      const double v = std::floor((p[a] - lo_[a]) / h_);
      c[a] = static_cast<std::int64_t>(std::clamp(v, -1e15, 1e15));
    }
    return c;
  }

  Cell cell_coords(const Vec3& p) const {
    Cell c = unclamped_cell(p);
    for (int a = 0; a < 3; ++a) c[a] = std::clamp<std::int64_t>(c[a], 0, dims_[a] - 1);
    return c;
  }

  std::int64_t flat(const Cell& c) const { return (c[0] * dims_[1] + c[1]) * dims_[2] + c[2]; }

  bool in_grid(const Cell& c) const {
    for (int a = 0; a < 3; ++a)
      if (c[a] < 0 || c[a] >= dims_[a]) return false;
    return true;
  }

  template <class F>
  void visit_cell(const Cell& c, F&& f) const {
    if (!in_grid(c)) return;
    const std::int64_t fl = flat(c);
    for (std::int64_t k = start_[fl]; k < start_[fl + 1]; ++k) f(items_[k]);
  }

  /// Grid cells at Chebyshev distance exactly r from c.
  template <class F>
  void visit_ring(const Cell& c, std::int64_t r, F&& f) const {
    auto lo = [&](int a) { return std::max<std::int64_t>(c[a] - r, 0); };
    auto hi = [&](int a) { return std::min<std::int64_t>(c[a] + r, dims_[a] - 1); };
    for (std::int64_t x = lo(0); x <= hi(0); ++x)
      for (std::int64_t y = lo(1); y <= hi(1); ++y) {
        if (std::abs(x - c[0]) == r || std::abs(y - c[1]) == r) {
          for (std::int64_t z = lo(2); z <= hi(2); ++z) visit_cell({x, y, z}, f);
        } else {
          visit_cell({x, y, c[2] - r}, f);
          if (r > 0) visit_cell({x, y, c[2] + r}, f);
        }
      }
  }

  std::vector<Vec3> pts_;
  Vec3 lo_ = Vec3::Zero();
  double h_ = 1.0;
  std::array<std::int64_t, 3> dims_{1, 1, 1};
  std::vector<std::int64_t> start_;
  std::vector<std::size_t> items_;
};

}  // namespace mmflow

#endif  // MMFLOW_NEIGHBOR_GRID_HPP
