#ifndef MMFLOW_FLOWS_DISCRETE_HPP
#define MMFLOW_FLOWS_DISCRETE_HPP

// Discrete flow matching with continuous-time Markov chains.
//
// States are 0..S-1. Under the mask path the last state S-1 is the mask M
// and data lives in 0..S-2; under the uniform path all S states are data.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mmflow/error.hpp"
#include "mmflow/rng.hpp"

namespace mmflow {

struct CategoricalState {
  int value = 0;
  int num_states = 2;

  CategoricalState() = default;
  CategoricalState(int v, int s) : value(v), num_states(s) {
    require(s >= 2, ErrorKind::InvalidArgument, "need at least two states");
    require(v >= 0 && v < s, ErrorKind::InvalidArgument, "state out of range");
  }

  int mask() const { return num_states - 1; }
  bool is_mask() const { return value == mask(); }
  bool operator==(const CategoricalState&) const = default;
};

enum class PathKind { Mask, Uniform };

struct ConditionalPath {
  PathKind kind = PathKind::Mask;
  int num_states = 2;

  int mask() const { return num_states - 1; }
};

/// Normalizer in the denominator of the conditional rate.
enum class RateNormalization {
  /// Number of states reachable by the path at time t (default; generates the path exactly).
  SupportCount,
  /// The full state count S as printed in the original rate formula.
  LiteralS,
};

namespace detail {

inline void check_path_args(const ConditionalPath& path, int xt, int x1, double t) {
  require(path.num_states >= 2, ErrorKind::InvalidArgument, "need at least two states");
  require(xt >= 0 && xt < path.num_states, ErrorKind::InvalidArgument, "xt out of range");
  require(x1 >= 0 && x1 < path.num_states, ErrorKind::InvalidArgument, "x1 out of range");
  require(t >= 0.0 && t <= 1.0, ErrorKind::InvalidArgument, "t must lie in [0, 1]");
  if (path.kind == PathKind::Mask && x1 == path.mask())
    fail(ErrorKind::MaskAsData, "the mask state cannot be a data endpoint");
}

}  // namespace detail

/// p_{t|1}(xt | x1).
inline double path_prob(const ConditionalPath& path, int xt, int x1, double t) {
  detail::check_path_args(path, xt, x1, t);
  const double hit = xt == x1 ? t : 0.0;
  if (path.kind == PathKind::Mask) return hit + (xt == path.mask() ? 1.0 - t : 0.0);
  return hit + (1.0 - t) / path.num_states;
}

/// d/dt p_{t|1}(j | x1).
inline double path_prob_dt(const ConditionalPath& path, int j, int x1) {
  detail::check_path_args(path, j, x1, 0.0);
  const double hit = j == x1 ? 1.0 : 0.0;
  if (path.kind == PathKind::Mask) return hit - (j == path.mask() ? 1.0 : 0.0);
  return hit - 1.0 / path.num_states;
}

inline double path_prob(const ConditionalPath& path, CategoricalState xt, CategoricalState x1, double t) {
  return path_prob(path, xt.value, x1.value, t);
}

/// Row of the conditional rate matrix out of xt. The diagonal closes the row.
///
/// Off-diagonal j: ReLU(dp(j) - dp(xt)) / (Z * p(xt)), set to zero when j is
/// outside the path support at t. The support counts states with p > 0 and
/// states entering it (p = 0, dp > 0), so the mask path at t = 0 still flows.
inline std::vector<double> rate_row(const ConditionalPath& path, int xt, int x1, double t,
                                    RateNormalization norm = RateNormalization::SupportCount) {
  detail::check_path_args(path, xt, x1, t);
  require(t < 1.0, ErrorKind::InvalidArgument, "rates are defined for t < 1");
  const int s = path.num_states;
  const double p_cur = path_prob(path, xt, x1, t);
  if (!(p_cur > 0.0)) fail(ErrorKind::ZeroSupport, "current state has zero conditional probability");

  std::vector<double> p(s), dp(s);
  int support = 0;
  for (int j = 0; j < s; ++j) {
    p[j] = path_prob(path, j, x1, t);
    dp[j] = path_prob_dt(path, j, x1);
    if (p[j] > 0.0 || dp[j] > 0.0) ++support;
  }
  const double z = norm == RateNormalization::SupportCount ? support : s;

  std::vector<double> row(s, 0.0);
  double out = 0.0;
  for (int j = 0; j < s; ++j) {
    if (j == xt) continue;
    if (!(p[j] > 0.0 || dp[j] > 0.0)) continue;
    const double r = std::max(dp[j] - dp[xt], 0.0) / (z * p_cur);
    row[j] = r;
    out += r;
  }
  row[xt] = -out;
  return row;
}

inline std::vector<double> rate_row(const ConditionalPath& path, CategoricalState xt, CategoricalState x1, double t,
                                    RateNormalization norm = RateNormalization::SupportCount) {
  return rate_row(path, xt.value, x1.value, t, norm);
}

struct CtmcStats {
  /// Steps whose transition probabilities left [0, 1] and were clamped.
  long clamped_steps = 0;
  /// Trajectories still masked after the last step and forced to a data state.
  long forced_unmasks = 0;
};

/// One Euler step: draw from Cat(delta{xt, .} + row * dt).
inline int ctmc_euler_step(int xt, const std::vector<double>& row, double dt, Rng& rng, CtmcStats* stats = nullptr) {
  require(xt >= 0 && static_cast<std::size_t>(xt) < row.size(), ErrorKind::InvalidArgument, "state out of range");
  require(dt > 0.0, ErrorKind::InvalidArgument, "dt must be positive");
  std::vector<double> probs(row.size());
  bool clamped = false;
  double total = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    double q = (static_cast<int>(j) == xt ? 1.0 : 0.0) + row[j] * dt;
    if (q < 0.0 || q > 1.0) {
      clamped = true;
      q = std::clamp(q, 0.0, 1.0);
    }
    probs[j] = q;
    total += q;
  }
  if (clamped) {
    if (stats) ++stats->clamped_steps;
    for (double& q : probs) q /= total;
    total = 1.0;
  }
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  int last_positive = xt;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] <= 0.0) continue;
    last_positive = static_cast<int>(j);
    acc += probs[j];
    if (u < acc) return static_cast<int>(j);
  }
  return last_positive;
}

/// Denoising posterior over the S-1 data states given (xt, t).
using PosteriorFn = std::function<std::vector<double>(int xt, double t)>;

/// Rate row averaged over the posterior, restricted to endpoints consistent with xt.
inline std::vector<double> expected_rate_row(const ConditionalPath& path, int xt, double t,
                                             const std::vector<double>& posterior,
                                             RateNormalization norm = RateNormalization::SupportCount) {
  const int s = path.num_states;
  std::vector<double> row(s, 0.0);
  double weight = 0.0;
  for (int x1 = 0; x1 < static_cast<int>(posterior.size()); ++x1) {
    if (posterior[x1] <= 0.0 || path_prob(path, xt, x1, t) <= 0.0) continue;
    const std::vector<double> r = rate_row(path, xt, x1, t, norm);
    for (int j = 0; j < s; ++j) row[j] += posterior[x1] * r[j];
    weight += posterior[x1];
  }
  if (weight > 0.0)
    for (double& r : row) r /= weight;
  return row;
}

/// Generates one categorical variable from the mask state with N Euler steps.
inline CategoricalState simulate_denoising(const PosteriorFn& posterior, int num_states, int n_steps, Rng& rng,
                                           RateNormalization norm = RateNormalization::SupportCount,
                                           CtmcStats* stats = nullptr) {
  require(n_steps >= 1, ErrorKind::InvalidArgument, "need at least one step");
  const ConditionalPath path{PathKind::Mask, num_states};
  const int mask = path.mask();
  const double dt = 1.0 / n_steps;
  int x = mask;
  std::vector<double> post;
  for (int k = 0; k < n_steps; ++k) {
    if (x != mask) break;  // data states are absorbing under the mask path
    const double t = k * dt;
    post = posterior(x, t);
    require(static_cast<int>(post.size()) == num_states - 1, ErrorKind::ShapeMismatch,
            "posterior must cover the S-1 data states");
    x = ctmc_euler_step(x, expected_rate_row(path, x, t, post, norm), dt, rng, stats);
  }
  if (x == mask) {
    if (stats) ++stats->forced_unmasks;
    x = static_cast<int>(std::max_element(post.begin(), post.end()) - post.begin());
  }
  return CategoricalState(x, num_states);
}

/// Negative log-likelihood of x1 under softmax(logits) over the data states.
inline double dfm_loss(const std::vector<double>& logits, int x1) {
  require(!logits.empty(), ErrorKind::InvalidArgument, "empty logits");
  if (x1 == static_cast<int>(logits.size())) fail(ErrorKind::MaskAsData, "the mask state cannot be a target");
  require(x1 >= 0 && x1 < static_cast<int>(logits.size()), ErrorKind::InvalidArgument, "target out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return -(logits[x1] - mx - std::log(z));
}

/// d(dfm_loss)/d(logits) = softmax - onehot(x1).
inline std::vector<double> dfm_loss_grad(const std::vector<double>& logits, int x1) {
  if (x1 == static_cast<int>(logits.size())) fail(ErrorKind::MaskAsData, "the mask state cannot be a target");
  require(x1 >= 0 && x1 < static_cast<int>(logits.size()), ErrorKind::InvalidArgument, "target out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> g(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (g[i] = std::exp(logits[i] - mx));
  for (double& v : g) v /= z;
  g[x1] -= 1.0;
  return g;
}

/// Samples xt ~ p_{t|1}(. | x1).
inline int sample_path_state(const ConditionalPath& path, int x1, double t, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (int j = 0; j < path.num_states; ++j) {
    acc += path_prob(path, j, x1, t);
    if (u < acc) return j;
  }
  return path.kind == PathKind::Mask ? path.mask() : path.num_states - 1;
}

}  // namespace mmflow

#endif  // MMFLOW_FLOWS_DISCRETE_HPP
