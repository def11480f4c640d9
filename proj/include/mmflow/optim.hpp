#ifndef MMFLOW_OPTIM_HPP
#define MMFLOW_OPTIM_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mmflow/mlp.hpp"

namespace mmflow {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm threshold; <= 0 disables clipping.
  double clip_norm = 1.0;
};

struct AdamState {
  std::vector<MatX> m;
  std::vector<MatX> v;
  long step = 0;
};

inline double global_norm(const std::vector<TensorRef>& tensors) {
  double ss = 0.0;
  for (const auto& t : tensors) ss += t.data->squaredNorm();
  return std::sqrt(ss);
}

/// Scales gradients in place so their global norm is at most max_norm; returns the norm before clipping.
inline double clip_global_norm(const std::vector<TensorRef>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& g : grads) *g.data *= s;
  }
  return norm;
}

/// One bias-corrected Adam update after global-norm clipping. Returns the pre-clip gradient norm.
inline double adam_step(const std::vector<TensorRef>& params, const std::vector<TensorRef>& grads, AdamState& state,
                        const AdamConfig& cfg) {
  require(params.size() == grads.size(), ErrorKind::ShapeMismatch, "parameter and gradient lists differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    require(params[i].data->rows() == grads[i].data->rows() && params[i].data->cols() == grads[i].data->cols(),
            ErrorKind::ShapeMismatch, "gradient shape differs from " + params[i].name);
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(MatX::Zero(p.data->rows(), p.data->cols()));
      state.v.push_back(MatX::Zero(p.data->rows(), p.data->cols()));
    }
  }
  require(state.m.size() == params.size(), ErrorKind::ShapeMismatch, "optimizer state does not match parameters");

  const double norm = clip_global_norm(grads, cfg.clip_norm);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const MatX& g = *grads[i].data;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const MatX mhat = state.m[i] / bc1;
    const MatX vhat = state.v[i] / bc2;
    *params[i].data -= cfg.lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + cfg.eps).matrix());
  }
  return norm;
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// evaluations without improvement, never going below `min_lr`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.8, int patience = 10, double min_lr = 5e-6)
      : lr_(lr), factor_(factor), patience_(patience), min_lr_(min_lr) {}

  double lr() const { return lr_; }
  int bad_evals() const { return bad_; }

  double observe(double metric) {
    if (metric < best_) {
      best_ = metric;
      bad_ = 0;
    } else if (++bad_ >= patience_) {
      lr_ = std::max(lr_ * factor_, min_lr_);
      bad_ = 0;
    }
    return lr_;
  }

 private:
  double lr_;
  double factor_;
  int patience_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

}  // namespace mmflow

#endif  // MMFLOW_OPTIM_HPP
