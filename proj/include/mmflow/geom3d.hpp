#ifndef MMFLOW_GEOM3D_HPP
#define MMFLOW_GEOM3D_HPP

// Rotations, SO(3) exp/log maps, geodesics, normal-anchored frames and
// rigid superposition.
//
// Tangent convention: rotation vectors are body-frame (right-trivialized),
// i.e. exp_map(R, v) = R * Exp(v) and log_map(R, Q) = Log(R^T Q).

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mmflow/error.hpp"
#include "mmflow/rng.hpp"

namespace mmflow {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using RotVec = Eigen::Vector3d;

/// Below this angle exp/log switch to their Taylor branches.
inline constexpr double kSmallAngle = 1e-6;
/// log_map rejects pairs whose relative trace is at or below -1 + this.
inline constexpr double kNearPiTrace = 1e-6;

/// Element of SO(3). Construction through from_matrix() validates the invariants.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  static Rotation identity() { return Rotation(); }

  /// Throws InvalidArgument if m is not orthonormal with det +1 (tolerance tol).
  static Rotation from_matrix(const Mat3& m, double tol = 1e-9) {
    Rotation r = unchecked(m);
    require(r.is_valid(tol), ErrorKind::InvalidArgument, "matrix is not a rotation");
    return r;
  }

  /// Wraps m without validation; callers guarantee orthonormality.
  static Rotation unchecked(const Mat3& m) {
    Rotation r;
    r.m_ = m;
    return r;
  }

  const Mat3& matrix() const { return m_; }
  double operator()(int i, int j) const { return m_(i, j); }
  Vec3 col(int j) const { return m_.col(j); }

  Rotation transpose() const { return unchecked(m_.transpose()); }
  Rotation inverse() const { return transpose(); }

  Rotation operator*(const Rotation& o) const { return unchecked(m_ * o.m_); }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }

  double orthonormality_error() const { return (m_.transpose() * m_ - Mat3::Identity()).norm(); }

  bool is_valid(double tol = 1e-9) const {
    return m_.allFinite() && orthonormality_error() <= tol && std::abs(m_.determinant() - 1.0) <= tol;
  }

 private:
  Mat3 m_;
};

struct Frame {
  Vec3 origin = Vec3::Zero();
  Rotation rot;

  Vec3 apply(const Vec3& p) const { return rot * p + origin; }
};

inline Mat3 hat(const Vec3& v) {
  Mat3 k;
  k << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return k;
}

inline Vec3 vee(const Mat3& k) { return Vec3(k(2, 1), k(0, 2), k(1, 0)); }

/// Matrix exponential of hat(v) by Rodrigues' formula.
inline Rotation exp_so3(const RotVec& v) {
  const double theta = v.norm();
  const Mat3 k = hat(v);
  const Mat3 k2 = k * k;
  if (theta < kSmallAngle) return Rotation::unchecked(Mat3::Identity() + k + 0.5 * k2);
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Rotation::unchecked(Mat3::Identity() + a * k + b * k2);
}

/// Rotation angle in [0, pi], well conditioned everywhere (atan2 form).
inline double rotation_angle(const Mat3& m) {
  const double s = 0.5 * vee(m - m.transpose()).norm();
  const double c = 0.5 * (m.trace() - 1.0);
  return std::atan2(s, c);
}

/// Principal logarithm; rejects angles at the cut locus.
inline RotVec log_so3(const Rotation& r) {
  const Mat3& m = r.matrix();
  if (m.trace() <= -1.0 + kNearPiTrace)
    fail(ErrorKind::AngleNearPi, "relative rotation angle too close to pi, log is multivalued");
  const Vec3 w = 0.5 * vee(m - m.transpose());
  const double s = w.norm();
  const double theta = std::atan2(s, 0.5 * (m.trace() - 1.0));
  if (theta < kSmallAngle) return w * (1.0 + theta * theta / 6.0);
  return w * (theta / s);
}

inline Rotation exp_map(const Rotation& base, const RotVec& tangent) { return base * exp_so3(tangent); }

inline RotVec log_map(const Rotation& base, const Rotation& target) {
  return log_so3(base.transpose() * target);
}

inline double geodesic_distance(const Rotation& a, const Rotation& b) {
  return rotation_angle(a.matrix().transpose() * b.matrix());
}

/// Point at fraction t along the minimal geodesic from r0 to r1.
inline Rotation geodesic_interp(const Rotation& r0, const Rotation& r1, double t) {
  require(t >= 0.0 && t <= 1.0, ErrorKind::InvalidArgument, "t must lie in [0, 1]");
  const RotVec v = log_map(r0, r1);
  if (t == 0.0) return r0;
  if (t == 1.0) return r1;
  return exp_map(r0, t * v);
}

/// Haar-uniform rotation from a normalized Gaussian quaternion.
inline Rotation sample_uniform_rotation(Rng& rng) {
  Eigen::Vector4d q;
  do {
    for (int i = 0; i < 4; ++i) q[i] = standard_normal(rng);
  } while (q.norm() < 1e-12);
  q.normalize();
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 m;
  m << 1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
       2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
       2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y);
  return Rotation::unchecked(m);
}

/// Nearest rotation in Frobenius norm (polar factor with det fixed to +1).
inline Rotation project_to_so3(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return Rotation::unchecked(svd.matrixU() * d * svd.matrixV().transpose());
}

/// Frame with columns (n, d, n x d), d the unit component of anchor_dir orthogonal to n.
inline Rotation frame_from_normal(const Vec3& n, const Vec3& anchor_dir) {
  require(std::abs(n.norm() - 1.0) <= 1e-9, ErrorKind::InvalidArgument, "normal must be a unit vector");
  const double anchor_norm = anchor_dir.norm();
  if (!(anchor_norm > 0.0) || n.cross(anchor_dir).norm() <= std::sin(1e-6) * anchor_norm)
    fail(ErrorKind::DegenerateDirection, "anchor direction is parallel to the normal");
  const Vec3 d = (anchor_dir - anchor_dir.dot(n) * n).normalized();
  Mat3 m;
  m.col(0) = n;
  m.col(1) = d;
  m.col(2) = n.cross(d);
  return Rotation::unchecked(m);
}

struct KabschResult {
  double rmsd = 0.0;
  /// Maps points of the first set onto the second: b ~ rot * a + origin.
  Frame alignment;
};

inline KabschResult kabsch_rmsd(std::span<const Vec3> a, std::span<const Vec3> b) {
  require(a.size() == b.size(), ErrorKind::LengthMismatch, "point sets differ in size");
  require(a.size() >= 3, ErrorKind::TooFewPoints, "need at least 3 corresponding points");
  const double n = static_cast<double>(a.size());
  Vec3 ca = Vec3::Zero(), cb = Vec3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca += a[i];
    cb += b[i];
  }
  ca /= n;
  cb /= n;
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) h += (a[i] - ca) * (b[i] - cb).transpose();

  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0 ? -1.0 : 1.0;
  const Mat3 r = v * d * u.transpose();

  KabschResult out;
  out.alignment.rot = Rotation::unchecked(r);
  out.alignment.origin = cb - r * ca;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (out.alignment.apply(a[i]) - b[i]).squaredNorm();
  out.rmsd = std::sqrt(ss / n);
  return out;
}

}  // namespace mmflow

#endif  // MMFLOW_GEOM3D_HPP
