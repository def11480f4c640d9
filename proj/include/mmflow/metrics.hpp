#ifndef MMFLOW_METRICS_HPP
#define MMFLOW_METRICS_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mmflow/error.hpp"
#include "mmflow/geom3d.hpp"
#include "mmflow/neighbor_grid.hpp"
#include "mmflow/surface.hpp"

namespace mmflow {

namespace detail {

/// Cell size giving roughly one point per cell over the bounding box.
inline double auto_cell_size(std::span<const Vec3> pts) {
  Vec3 lo = pts[0], hi = pts[0];
  for (const Vec3& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double extent = (hi - lo).maxCoeff();
  const double h = extent / std::cbrt(static_cast<double>(pts.size()));
  return h > 0.0 ? h : 1.0;
}

/// Mean over `from` of the distance to the nearest point of `to`.
inline double directed_chamfer(std::span<const Vec3> from, std::span<const Vec3> to) {
  const NeighborGrid grid(to, auto_cell_size(to));
  double sum = 0.0;
  for (const Vec3& p : from) {
    double d = 0.0;
    grid.nearest(p, &d);
    sum += d;
  }
  return sum / static_cast<double>(from.size());
}

}  // namespace detail

/// Symmetric Chamfer distance: half the sum of both directed mean nearest distances.
inline double chamfer(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.empty() || b.empty()) fail(ErrorKind::EmptySet, "chamfer needs two nonempty sets");
  return 0.5 * (detail::directed_chamfer(a, b) + detail::directed_chamfer(b, a));
}

inline constexpr double kUnitNormalTol = 1e-6;

/// Mean |n_gt . n_pred| over ground-truth points, matched to their nearest predicted point.
inline double normal_consistency(std::span<const SurfacePoint> pred, std::span<const SurfacePoint> gt) {
  if (pred.empty() || gt.empty()) fail(ErrorKind::EmptySet, "normal consistency needs two nonempty sets");
  for (auto set : {pred, gt})
    for (const SurfacePoint& p : set)
      if (std::abs(p.normal.norm() - 1.0) > kUnitNormalTol) fail(ErrorKind::NonUnitNormal, "normal is not unit length");
  std::vector<Vec3> pos;
  pos.reserve(pred.size());
  for (const SurfacePoint& p : pred) pos.push_back(p.pos);
  const NeighborGrid grid(pos, detail::auto_cell_size(pos));
  double sum = 0.0;
  for (const SurfacePoint& g : gt) sum += std::abs(g.normal.dot(pred[grid.nearest(g.pos)].normal));
  return std::min(1.0, sum / static_cast<double>(gt.size()));
}

struct VoxelGrid {
  Vec3 origin = Vec3::Zero();
  double spacing = 1.0;
  std::array<long, 3> dims{1, 1, 1};
  std::vector<bool> occupancy;

  long flat(long x, long y, long z) const { return (x * dims[1] + y) * dims[2] + z; }
  long count() const { return static_cast<long>(std::count(occupancy.begin(), occupancy.end(), true)); }
};

/// Voxel grid whose origin is the union bounding-box minimum snapped down to a multiple of `spacing`.
inline VoxelGrid make_voxel_grid(std::span<const Vec3> a, std::span<const Vec3> b, double spacing) {
  require(spacing > 0.0, ErrorKind::InvalidArgument, "voxel spacing must be positive");
  if (a.empty() || b.empty()) fail(ErrorKind::EmptySet, "voxel IoU needs two nonempty sets");
  Vec3 lo = a[0], hi = a[0];
  for (auto set : {a, b})
    for (const Vec3& p : set) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
  VoxelGrid g;
  g.spacing = spacing;
  for (int k = 0; k < 3; ++k) {
    g.origin[k] = std::floor(lo[k] / spacing) * spacing;
    g.dims[k] = static_cast<long>(std::floor(hi[k] / spacing) - std::floor(lo[k] / spacing)) + 1;
  }
  g.occupancy.assign(static_cast<std::size_t>(g.dims[0] * g.dims[1] * g.dims[2]), false);
  return g;
}

inline void occupy(VoxelGrid& g, std::span<const Vec3> pts) {
  const Vec3 base = (g.origin / g.spacing).array().round();
  for (const Vec3& p : pts) {
    std::array<long, 3> c{};
    for (int k = 0; k < 3; ++k)
      c[k] = std::clamp(static_cast<long>(std::floor(p[k] / g.spacing) - base[k]), 0L, g.dims[k] - 1);
    g.occupancy[static_cast<std::size_t>(g.flat(c[0], c[1], c[2]))] = true;
  }
}

inline double voxel_iou(std::span<const Vec3> a, std::span<const Vec3> b, double spacing = 1.0) {
  VoxelGrid ga = make_voxel_grid(a, b, spacing);
  VoxelGrid gb = ga;
  occupy(ga, a);
  occupy(gb, b);
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < ga.occupancy.size(); ++i) {
    inter += ga.occupancy[i] && gb.occupancy[i];
    uni += ga.occupancy[i] || gb.occupancy[i];
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Percentage of positions with equal types.
inline double aar(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) fail(ErrorKind::LengthMismatch, "sequences differ in length");
  if (gt.empty()) fail(ErrorKind::EmptySet, "empty sequences");
  std::size_t same = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) same += pred[i] == gt[i];
  return 100.0 * static_cast<double>(same) / static_cast<double>(gt.size());
}

inline double rmsd(std::span<const Vec3> a, std::span<const Vec3> b) { return kabsch_rmsd(a, b).rmsd; }

/// 2 E|X - Y| - E|X - X'| - E|Y - Y'| with unbiased within-set means. Columns are samples.
inline double energy_distance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  require(x.rows() == y.rows(), ErrorKind::DimMismatch, "sample dimensions differ");
  require(x.cols() >= 2 && y.cols() >= 2, ErrorKind::EmptySet, "energy distance needs at least two samples per set");
  auto mean_cross = [](const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < p.cols(); ++i) s += (q.colwise() - p.col(i)).colwise().norm().sum();
    return s / (static_cast<double>(p.cols()) * static_cast<double>(q.cols()));
  };
  auto mean_within = [](const Eigen::MatrixXd& p) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < p.cols(); ++i)
      for (Eigen::Index j = i + 1; j < p.cols(); ++j) s += (p.col(i) - p.col(j)).norm();
    const double n = static_cast<double>(p.cols());
    return 2.0 * s / (n * (n - 1.0));
  };
  return 2.0 * mean_cross(x, y) - mean_within(x) - mean_within(y);
}

/// Half the L1 distance between two probability vectors.
inline double total_variation(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), ErrorKind::LengthMismatch, "distributions differ in support");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

struct MetricReport {
  double chamfer = 0.0;
  double nc = 0.0;
  double iou = 0.0;
  double rmsd = 0.0;
  double aar = 0.0;
};

/// NaN marks a metric the inputs could not support and is written as null.
inline void write_report_json(std::ostream& out, const MetricReport& r) {
  auto v = [](double x) { return std::isnan(x) ? std::string("null") : detail::fmt17(x); };
  out << "{\"chamfer\":" << v(r.chamfer) << ",\"nc\":" << v(r.nc) << ",\"iou\":" << v(r.iou)
      << ",\"rmsd\":" << v(r.rmsd) << ",\"aar\":" << v(r.aar) << "}\n";
}

}  // namespace mmflow

#endif  // MMFLOW_METRICS_HPP
