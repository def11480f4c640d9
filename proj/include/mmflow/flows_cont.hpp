#ifndef MMFLOW_FLOWS_CONT_HPP
#define MMFLOW_FLOWS_CONT_HPP

// Conditional flow matching on flat spaces: Euclidean positions, continuous
// surface features, soft one-hot residue types, and torus-valued torsions.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include "mmflow/error.hpp"
#include "mmflow/rng.hpp"

namespace mmflow {

using VecX = Eigen::VectorXd;

/// Training times are drawn from [0, kMaxTrainT] so that (x1 - xt) / (1 - t) stays bounded.
inline constexpr double kMaxTrainT = 1.0 - 1e-4;

inline double sample_train_time(Rng& rng) { return kMaxTrainT * uniform01(rng); }

struct LinearPathSample {
  VecX x0;
  VecX x1;
  double t = 0.0;
  VecX xt;
  VecX target_field;
};

inline LinearPathSample linear_path(const VecX& x0, const VecX& x1, double t) {
  require(x0.size() == x1.size(), ErrorKind::DimMismatch, "x0 and x1 differ in dimension");
  require(t >= 0.0 && t <= 1.0, ErrorKind::InvalidArgument, "t must lie in [0, 1]");
  LinearPathSample s;
  s.x0 = x0;
  s.x1 = x1;
  s.t = t;
  s.xt = t * x1 + (1.0 - t) * x0;
  s.target_field = x1 - x0;
  return s;
}

/// Angle on the circle, kept in [0, 2pi).
class TorusAngle {
 public:
  TorusAngle() = default;
  explicit TorusAngle(double radians) : value_(wrap(radians)) {}

  double value() const { return value_; }

  static double wrap(double a) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double w = std::fmod(a, two_pi);
    if (w < 0.0) w += two_pi;
    if (w >= two_pi) w = 0.0;  // fmod + 2pi can round up to 2pi
    return w;
  }

 private:
  double value_ = 0.0;
};

/// wrap(t * c1 + (1 - t) * c0). This is the literal mod-2pi interpolant,
/// not the short arc: (350deg, 10deg, 0.5) lands on 180deg.
inline TorusAngle torus_path(TorusAngle c0, TorusAngle c1, double t) {
  require(t >= 0.0 && t <= 1.0, ErrorKind::InvalidArgument, "t must lie in [0, 1]");
  return TorusAngle(t * c1.value() + (1.0 - t) * c0.value());
}

/// Derivative of the unwrapped interpolant.
inline double torus_target(TorusAngle c0, TorusAngle c1) { return c1.value() - c0.value(); }

enum class NormConvention { Squared, Unsquared };

inline double continuous_feature_loss(const VecX& pred_field, const VecX& x0, const VecX& x1,
                                      NormConvention conv = NormConvention::Squared) {
  require(pred_field.size() == x0.size() && x0.size() == x1.size(), ErrorKind::DimMismatch,
          "prediction and endpoints differ in dimension");
  const double sq = (pred_field - (x1 - x0)).squaredNorm();
  return conv == NormConvention::Squared ? sq : std::sqrt(sq);
}

inline VecX euler_step(const VecX& xt, const VecX& field, double step) {
  require(step > 0.0, ErrorKind::InvalidArgument, "step must be positive");
  require(xt.size() == field.size(), ErrorKind::DimMismatch, "state and field differ in dimension");
  return xt + step * field;
}

/// N forward-Euler steps over t = 0, 1/N, ..., (N-1)/N.
inline VecX integrate_euler(const VecX& x0, const std::function<VecX(const VecX&, double)>& field, int n_steps) {
  require(n_steps >= 1, ErrorKind::InvalidArgument, "need at least one step");
  VecX x = x0;
  const double h = 1.0 / n_steps;
  for (int k = 0; k < n_steps; ++k) x = euler_step(x, field(x, k * h), h);
  return x;
}

inline VecX sample_gaussian_prior(Eigen::Index n, Rng& rng) {
  VecX x(n);
  for (Eigen::Index i = 0; i < n; ++i) x[i] = standard_normal(rng);
  return x;
}

inline constexpr int kNumResidueTypes = 20;

/// Soft one-hot residue type: a logit vector, decoded by argmax with lowest-index ties.
struct SoftType {
  VecX logits = VecX::Zero(kNumResidueTypes);

  static SoftType one_hot(int type) {
    require(type >= 0 && type < kNumResidueTypes, ErrorKind::InvalidArgument, "residue type out of range");
    SoftType s;
    s.logits[type] = 1.0;
    return s;
  }

  int decode() const {
    int best = 0;
    for (int i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;
    return best;
  }
};

}  // namespace mmflow

#endif  // MMFLOW_FLOWS_CONT_HPP
