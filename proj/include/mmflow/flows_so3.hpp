#ifndef MMFLOW_FLOWS_SO3_HPP
#define MMFLOW_FLOWS_SO3_HPP

// Geodesic conditional flow matching on SO(3). Vector fields are body-frame
// rotation vectors in the tangent space at the current rotation.

#include <functional>

#include "mmflow/flows_cont.hpp"
#include "mmflow/geom3d.hpp"

namespace mmflow {

/// Sampler steps between polar re-projections onto SO(3).
inline constexpr int kReorthoEvery = 64;

struct So3PathSample {
  Rotation r0;
  Rotation r1;
  double t = 0.0;
  Rotation rt;
  RotVec target_field = RotVec::Zero();
};

inline So3PathSample so3_path(const Rotation& r0, const Rotation& r1, double t) {
  require(t >= 0.0, ErrorKind::InvalidArgument, "t must be nonnegative");
  if (t > kMaxTrainT) fail(ErrorKind::TEndpoint, "t too close to 1 for the (1 - t) target");
  So3PathSample s;
  s.r0 = r0;
  s.r1 = r1;
  s.t = t;
  s.rt = geodesic_interp(r0, r1, t);
  s.target_field = log_map(s.rt, r1) / (1.0 - t);
  return s;
}

inline double so3_loss(const RotVec& pred_field, const So3PathSample& sample) {
  return (pred_field - sample.target_field).squaredNorm();
}

inline RotVec so3_loss_grad(const RotVec& pred_field, const So3PathSample& sample) {
  return 2.0 * (pred_field - sample.target_field);
}

inline Rotation so3_euler_step(const Rotation& rt, const RotVec& field, double step) {
  require(step > 0.0, ErrorKind::InvalidArgument, "step must be positive");
  return exp_map(rt, step * field);
}

/// Chained exp-map Euler steps with periodic polar re-projection.
class So3Integrator {
 public:
  explicit So3Integrator(Rotation start, int reortho_every = kReorthoEvery)
      : state_(start), reortho_every_(reortho_every) {}

  const Rotation& state() const { return state_; }
  long steps() const { return steps_; }

  const Rotation& step(const RotVec& field, double h) {
    state_ = so3_euler_step(state_, field, h);
    if (reortho_every_ > 0 && ++steps_ % reortho_every_ == 0) state_ = project_to_so3(state_.matrix());
    return state_;
  }

 private:
  Rotation state_;
  int reortho_every_;
  long steps_ = 0;
};

inline Rotation integrate_so3(const Rotation& r0, const std::function<RotVec(const Rotation&, double)>& field,
                              int n_steps) {
  require(n_steps >= 1, ErrorKind::InvalidArgument, "need at least one step");
  So3Integrator it(r0);
  const double h = 1.0 / n_steps;
  for (int k = 0; k < n_steps; ++k) it.step(field(it.state(), k * h), h);
  return it.state();
}

}  // namespace mmflow

#endif  // MMFLOW_FLOWS_SO3_HPP
