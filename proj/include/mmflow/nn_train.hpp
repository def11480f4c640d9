#ifndef MMFLOW_NN_TRAIN_HPP
#define MMFLOW_NN_TRAIN_HPP

// Conditional vector-field regressors, the weighted multi-modality flow
// matching loss, and classifier-free conditioning.
//
// Every regressor sees [state features; sinusoidal time embedding (32);
// condition embedding]. The condition embedding table has one column per
// condition slot; column 0 is the null condition and is pinned to zero, the
// other columns start at zero and only move when their condition is trained.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmflow/flows_cont.hpp"
#include "mmflow/flows_discrete.hpp"
#include "mmflow/flows_so3.hpp"
#include "mmflow/mlp.hpp"
#include "mmflow/optim.hpp"

namespace mmflow {

inline constexpr int kTimeEmbedDim = 32;

/// [sin(w_k t), cos(w_k t)] with w_k = 2^(k/2), k = 0..15.
inline void time_embedding(double t, double* out) {
  constexpr int half = kTimeEmbedDim / 2;
  for (int k = 0; k < half; ++k) {
    const double w = std::exp2(0.5 * k);
    out[k] = std::sin(w * t);
    out[half + k] = std::cos(w * t);
  }
}

inline VecX time_embedding(double t) {
  VecX e(kTimeEmbedDim);
  time_embedding(t, e.data());
  return e;
}

inline constexpr int kMaxConditionLength = 32;
inline constexpr int kNumConditionSlots = 3 + kMaxConditionLength;

struct ConditionLabel {
  enum class Kind { Null, Cyclic, Disulfide, Length };
  Kind kind = Kind::Null;
  int length = 0;

  static ConditionLabel null() { return {}; }
  static ConditionLabel cyclic() { return {Kind::Cyclic, 0}; }
  static ConditionLabel disulfide() { return {Kind::Disulfide, 0}; }
  static ConditionLabel peptide_length(int n) {
    require(n >= 1, ErrorKind::InvalidArgument, "peptide length must be positive");
    return {Kind::Length, n};
  }

  /// Embedding slot; 0 is reserved for the null condition.
  int index() const {
    switch (kind) {
      case Kind::Null: return 0;
      case Kind::Cyclic: return 1;
      case Kind::Disulfide: return 2;
      case Kind::Length: return 3 + std::min(length, kMaxConditionLength) - 1;
    }
    return 0;
  }

  static ConditionLabel parse(const std::string& s) {
    if (s == "null") return null();
    if (s == "cyclic") return cyclic();
    if (s == "disulfide") return disulfide();
    if (s.rfind("length", 0) == 0 && s.size() > 6) return peptide_length(std::stoi(s.substr(6)));
    fail(ErrorKind::ConfigError, "unknown condition '" + s + "'");
  }
};

inline constexpr int kNullCondition = 0;

struct ModelGrads {
  MlpGrads net;
  MatX cond;

  void set_zero() {
    net.set_zero();
    cond.setZero();
  }

  void collect(const std::string& prefix, std::vector<TensorRef>& out) {
    net.collect(prefix + ".net", out);
    out.push_back({prefix + ".cond", &cond});
  }
};

class VectorFieldModel {
 public:
  VectorFieldModel() = default;

  static VectorFieldModel init(int state_dim, int out_dim, const std::vector<int>& hidden, Activation act, int cond_dim,
                               Rng& rng) {
    require(state_dim > 0 && out_dim > 0 && cond_dim > 0, ErrorKind::ShapeMismatch, "model dimensions must be positive");
    VectorFieldModel m;
    m.state_dim_ = state_dim;
    std::vector<int> sizes{state_dim + kTimeEmbedDim + cond_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(out_dim);
    m.net_ = Mlp::init(sizes, act, rng);
    m.cond_ = MatX::Zero(cond_dim, kNumConditionSlots);
    return m;
  }

  int state_dim() const { return state_dim_; }
  int out_dim() const { return net_.out_dim(); }
  int cond_dim() const { return static_cast<int>(cond_.rows()); }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  MatX& cond_table() { return cond_; }
  const MatX& cond_table() const { return cond_; }

  MatX assemble_input(const MatX& states, std::span<const double> t, std::span<const int> cond) const {
    const Eigen::Index b = states.cols();
    require(states.rows() == state_dim_, ErrorKind::ShapeMismatch, "state dimension does not match the model");
    require(static_cast<Eigen::Index>(t.size()) == b && static_cast<Eigen::Index>(cond.size()) == b,
            ErrorKind::ShapeMismatch, "times and conditions must match the batch size");
    MatX in(state_dim_ + kTimeEmbedDim + cond_dim(), b);
    for (Eigen::Index j = 0; j < b; ++j) {
      require(cond[j] >= 0 && cond[j] < kNumConditionSlots, ErrorKind::InvalidArgument, "condition slot out of range");
      in.col(j).head(state_dim_) = states.col(j);
      time_embedding(t[j], in.col(j).data() + state_dim_);
      in.col(j).tail(cond_dim()) = cond_.col(cond[j]);
    }
    return in;
  }

  MatX forward(const MatX& states, std::span<const double> t, std::span<const int> cond) const {
    return net_.forward(assemble_input(states, t, cond));
  }

  MatX forward(const MatX& states, std::span<const double> t, std::span<const int> cond, Mlp::Cache& cache) const {
    return net_.forward(assemble_input(states, t, cond), cache);
  }

  VecX predict(const VecX& state, double t, int cond = kNullCondition) const {
    const double ts[1] = {t};
    const int cs[1] = {cond};
    return forward(MatX(state), ts, cs).col(0);
  }

  ModelGrads zero_grads() const {
    return {net_.zero_grads(), MatX::Zero(cond_.rows(), cond_.cols())};
  }

  /// Accumulates gradients of a forward pass made with `cache`.
  void backward(const Mlp::Cache& cache, std::span<const int> cond, const MatX& upstream, ModelGrads& grads) const {
    const MatX din = net_.backward(cache, upstream, grads.net);
    for (Eigen::Index j = 0; j < din.cols(); ++j)
      if (cond[j] != kNullCondition) grads.cond.col(cond[j]) += din.col(j).tail(cond_dim());
  }

  void collect(const std::string& prefix, std::vector<TensorRef>& out) {
    net_.collect(prefix + ".net", out);
    out.push_back({prefix + ".cond", &cond_});
  }

 private:
  Mlp net_;
  MatX cond_;
  int state_dim_ = 0;
};

/// Guided field (1 + w) v_cond - w v_null.
inline VecX cfg_sample_field(const VecX& v_cond, const VecX& v_null, double guidance_w) {
  require(v_cond.size() == v_null.size(), ErrorKind::ShapeMismatch, "guided fields differ in shape");
  return (1.0 + guidance_w) * v_cond - guidance_w * v_null;
}

inline MatX cfg_sample_field(const MatX& v_cond, const MatX& v_null, double guidance_w) {
  require(v_cond.rows() == v_null.rows() && v_cond.cols() == v_null.cols(), ErrorKind::ShapeMismatch,
          "guided fields differ in shape");
  return (1.0 + guidance_w) * v_cond - guidance_w * v_null;
}

// ---------------------------------------------------------------------------
// Batches. Columns are samples; `cond` holds condition slots.

/// Linear-path regression batch (positions, continuous features, residue positions, soft types).
struct EuclideanBatch {
  MatX x0;
  MatX x1;
  std::vector<double> t;
  std::vector<int> cond;

  std::size_t size() const { return t.size(); }
  bool empty() const { return t.empty(); }
};

struct So3Batch {
  std::vector<So3PathSample> samples;
  std::vector<int> cond;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

/// Torsion angles, one column of D angles per sample, each in [0, 2pi).
struct TorusBatch {
  MatX c0;
  MatX c1;
  std::vector<double> t;
  std::vector<int> cond;

  std::size_t size() const { return t.size(); }
  bool empty() const { return t.empty(); }
};

/// Mask-path discrete batch with pre-drawn noisy states.
struct CategoricalBatch {
  int num_states = 2;
  std::vector<int> xt;
  std::vector<int> x1;
  std::vector<double> t;
  std::vector<int> cond;

  std::size_t size() const { return t.size(); }
  bool empty() const { return t.empty(); }
};

struct StructureBatch {
  EuclideanBatch pos;
  So3Batch ori;
  TorusBatch tor;
  EuclideanBatch type;

  bool empty() const { return pos.empty() && ori.empty() && tor.empty() && type.empty(); }
};

struct JointBatch {
  EuclideanBatch pos;
  So3Batch ori;
  CategoricalBatch cat;
  EuclideanBatch con;
  StructureBatch str;

  bool empty() const { return pos.empty() && ori.empty() && cat.empty() && con.empty() && str.empty(); }

  template <class F>
  void for_each_condition_list(F&& f) {
    f(pos.cond);
    f(ori.cond);
    f(cat.cond);
    f(con.cond);
    f(str.pos.cond);
    f(str.ori.cond);
    f(str.tor.cond);
    f(str.type.cond);
  }
};

struct LossWeights {
  double pos = 0.2;
  double ori = 0.2;
  double cat = 1.0;
  double con = 1.0;
  double str = 1.0;
};

struct LossBreakdown {
  double pos = 0.0;
  double ori = 0.0;
  double cat = 0.0;
  double con = 0.0;
  double str = 0.0;
  double total = 0.0;
};

struct FlowModels {
  std::optional<VectorFieldModel> pos, ori, cat, con, str_pos, str_ori, str_tor, str_type;

  template <class F>
  void for_each(F&& f) {
    f("pos", pos);
    f("ori", ori);
    f("cat", cat);
    f("con", con);
    f("str_pos", str_pos);
    f("str_ori", str_ori);
    f("str_tor", str_tor);
    f("str_type", str_type);
  }

  std::vector<TensorRef> params() {
    std::vector<TensorRef> out;
    for_each([&](const char* name, std::optional<VectorFieldModel>& m) {
      if (m) m->collect(name, out);
    });
    return out;
  }
};

struct FlowGrads {
  std::optional<ModelGrads> pos, ori, cat, con, str_pos, str_ori, str_tor, str_type;

  static FlowGrads zeros_like(FlowModels& models) {
    FlowGrads g;
    auto copy = [](const std::optional<VectorFieldModel>& m, std::optional<ModelGrads>& out) {
      if (m) out = m->zero_grads();
    };
    copy(models.pos, g.pos);
    copy(models.ori, g.ori);
    copy(models.cat, g.cat);
    copy(models.con, g.con);
    copy(models.str_pos, g.str_pos);
    copy(models.str_ori, g.str_ori);
    copy(models.str_tor, g.str_tor);
    copy(models.str_type, g.str_type);
    return g;
  }

  /// Same order as FlowModels::params().
  std::vector<TensorRef> tensors() {
    std::vector<TensorRef> out;
    auto add = [&](const char* name, std::optional<ModelGrads>& g) {
      if (g) g->collect(name, out);
    };
    add("pos", pos);
    add("ori", ori);
    add("cat", cat);
    add("con", con);
    add("str_pos", str_pos);
    add("str_ori", str_ori);
    add("str_tor", str_tor);
    add("str_type", str_type);
    return out;
  }

  void set_zero() {
    for (auto* g : {&pos, &ori, &cat, &con, &str_pos, &str_ori, &str_tor, &str_type})
      if (*g) (*g)->set_zero();
  }
};

// ---------------------------------------------------------------------------
// Per-modality state features and targets.

/// Rotation flattened row-major into 9 features.
inline void rotation_features(const Rotation& r, double* out) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out[3 * i + j] = r(i, j);
}

/// [cos c; sin c] for each angle.
inline VecX torus_features(const VecX& angles) {
  VecX f(2 * angles.size());
  for (Eigen::Index i = 0; i < angles.size(); ++i) {
    f[i] = std::cos(angles[i]);
    f[angles.size() + i] = std::sin(angles[i]);
  }
  return f;
}

inline VecX one_hot(int k, int n) {
  VecX v = VecX::Zero(n);
  v[k] = 1.0;
  return v;
}

namespace detail {

inline VectorFieldModel& need(std::optional<VectorFieldModel>& m, const char* name) {
  if (!m) fail(ErrorKind::InvalidArgument, std::string("batch has samples for '") + name + "' but no model");
  return *m;
}

inline ModelGrads* grad_slot(FlowGrads* g, std::optional<ModelGrads> FlowGrads::*member) {
  if (!g) return nullptr;
  auto& slot = g->*member;
  require(slot.has_value(), ErrorKind::InvalidArgument, "missing gradient buffer");
  return &*slot;
}

/// Mean over the batch of ||v - target||^2 (or ||.|| when unsquared); scales the
/// upstream gradient by `weight` when grads are requested.
inline double regression_term(const VectorFieldModel& model, const MatX& states, std::span<const double> t,
                              std::span<const int> cond, const MatX& targets, NormConvention conv, ModelGrads* grads,
                              double weight) {
  Mlp::Cache cache;
  const MatX v = model.forward(states, t, cond, cache);
  require(v.rows() == targets.rows(), ErrorKind::ShapeMismatch, "model output does not match the target dimension");
  const MatX e = v - targets;
  const double b = static_cast<double>(e.cols());
  double loss = 0.0;
  MatX up(e.rows(), e.cols());
  for (Eigen::Index j = 0; j < e.cols(); ++j) {
    const double sq = e.col(j).squaredNorm();
    if (conv == NormConvention::Squared) {
      loss += sq;
      up.col(j) = 2.0 * e.col(j);
    } else {
      const double n = std::sqrt(sq);
      loss += n;
      up.col(j) = n > 0.0 ? VecX(e.col(j) / n) : VecX::Zero(e.rows());
    }
  }
  if (grads) model.backward(cache, cond, up * (weight / b), *grads);
  return loss / b;
}

inline double euclidean_term(const VectorFieldModel& model, const EuclideanBatch& batch, NormConvention conv,
                             ModelGrads* grads, double weight) {
  require(batch.x0.cols() == static_cast<Eigen::Index>(batch.size()) && batch.x1.cols() == batch.x0.cols() &&
              batch.x1.rows() == batch.x0.rows() && batch.cond.size() == batch.size(),
          ErrorKind::ShapeMismatch, "inconsistent Euclidean batch");
  MatX xt(batch.x0.rows(), batch.x0.cols());
  for (Eigen::Index j = 0; j < xt.cols(); ++j) xt.col(j) = batch.t[j] * batch.x1.col(j) + (1.0 - batch.t[j]) * batch.x0.col(j);
  return regression_term(model, xt, batch.t, batch.cond, batch.x1 - batch.x0, conv, grads, weight);
}

inline double so3_term(const VectorFieldModel& model, const So3Batch& batch, ModelGrads* grads, double weight) {
  require(batch.cond.size() == batch.size(), ErrorKind::ShapeMismatch, "inconsistent SO(3) batch");
  const Eigen::Index b = static_cast<Eigen::Index>(batch.size());
  MatX states(9, b), targets(3, b);
  std::vector<double> t(b);
  for (Eigen::Index j = 0; j < b; ++j) {
    rotation_features(batch.samples[j].rt, states.col(j).data());
    targets.col(j) = batch.samples[j].target_field;
    t[j] = batch.samples[j].t;
  }
  return regression_term(model, states, t, batch.cond, targets, NormConvention::Squared, grads, weight);
}

inline double torus_term(const VectorFieldModel& model, const TorusBatch& batch, ModelGrads* grads, double weight) {
  require(batch.c0.cols() == static_cast<Eigen::Index>(batch.size()) && batch.c1.cols() == batch.c0.cols() &&
              batch.cond.size() == batch.size(),
          ErrorKind::ShapeMismatch, "inconsistent torus batch");
  const Eigen::Index d = batch.c0.rows();
  MatX states(2 * d, batch.c0.cols());
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    VecX ct(d);
    for (Eigen::Index i = 0; i < d; ++i)
      ct[i] = torus_path(TorusAngle(batch.c0(i, j)), TorusAngle(batch.c1(i, j)), batch.t[j]).value();
    states.col(j) = torus_features(ct);
  }
  return regression_term(model, states, batch.t, batch.cond, batch.c1 - batch.c0, NormConvention::Squared, grads,
                         weight);
}

inline double categorical_term(const VectorFieldModel& model, const CategoricalBatch& batch, ModelGrads* grads,
                               double weight) {
  const Eigen::Index b = static_cast<Eigen::Index>(batch.size());
  require(batch.xt.size() == batch.size() && batch.x1.size() == batch.size() && batch.cond.size() == batch.size(),
          ErrorKind::ShapeMismatch, "inconsistent categorical batch");
  require(model.out_dim() == batch.num_states - 1, ErrorKind::ShapeMismatch, "logit count must be S - 1");
  MatX states = MatX::Zero(batch.num_states, b);
  for (Eigen::Index j = 0; j < b; ++j) states(batch.xt[j], j) = 1.0;
  Mlp::Cache cache;
  const MatX logits = model.forward(states, batch.t, batch.cond, cache);
  double loss = 0.0;
  MatX up(logits.rows(), b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const std::vector<double> l(logits.col(j).data(), logits.col(j).data() + logits.rows());
    loss += dfm_loss(l, batch.x1[j]);
    if (grads) {
      const std::vector<double> g = dfm_loss_grad(l, batch.x1[j]);
      for (Eigen::Index i = 0; i < logits.rows(); ++i) up(i, j) = g[i];
    }
  }
  if (grads) model.backward(cache, batch.cond, up * (weight / static_cast<double>(b)), *grads);
  return loss / static_cast<double>(b);
}

}  // namespace detail

/// Weighted sum lambda_pos L_pos + lambda_ori L_ori + lambda_cat L_cat + lambda_con L_con + lambda_str L_str.
/// L_str sums the residue position, orientation, torsion and soft-type terms.
/// When `grads` is given, gradients of the total are accumulated into it.
inline LossBreakdown total_loss(const JointBatch& batch, const LossWeights& w, FlowModels& models,
                                FlowGrads* grads = nullptr, NormConvention con_norm = NormConvention::Squared) {
  if (batch.empty()) fail(ErrorKind::EmptyBatch, "no modality has samples");
  for (double l : {w.pos, w.ori, w.cat, w.con, w.str})
    require(l >= 0.0, ErrorKind::InvalidArgument, "loss weights must be nonnegative");
  LossBreakdown out;
  if (!batch.pos.empty())
    out.pos = detail::euclidean_term(detail::need(models.pos, "pos"), batch.pos, NormConvention::Squared,
                                     detail::grad_slot(grads, &FlowGrads::pos), w.pos);
  if (!batch.ori.empty())
    out.ori = detail::so3_term(detail::need(models.ori, "ori"), batch.ori, detail::grad_slot(grads, &FlowGrads::ori),
                               w.ori);
  if (!batch.cat.empty())
    out.cat = detail::categorical_term(detail::need(models.cat, "cat"), batch.cat,
                                       detail::grad_slot(grads, &FlowGrads::cat), w.cat);
  if (!batch.con.empty())
    out.con = detail::euclidean_term(detail::need(models.con, "con"), batch.con, con_norm,
                                     detail::grad_slot(grads, &FlowGrads::con), w.con);
  const StructureBatch& s = batch.str;
  if (!s.pos.empty())
    out.str += detail::euclidean_term(detail::need(models.str_pos, "str_pos"), s.pos, NormConvention::Squared,
                                      detail::grad_slot(grads, &FlowGrads::str_pos), w.str);
  if (!s.ori.empty())
    out.str += detail::so3_term(detail::need(models.str_ori, "str_ori"), s.ori,
                                detail::grad_slot(grads, &FlowGrads::str_ori), w.str);
  if (!s.tor.empty())
    out.str += detail::torus_term(detail::need(models.str_tor, "str_tor"), s.tor,
                                  detail::grad_slot(grads, &FlowGrads::str_tor), w.str);
  if (!s.type.empty())
    out.str += detail::euclidean_term(detail::need(models.str_type, "str_type"), s.type, NormConvention::Squared,
                                      detail::grad_slot(grads, &FlowGrads::str_type), w.str);
  out.total = w.pos * out.pos + w.ori * out.ori + w.cat * out.cat + w.con * out.con + w.str * out.str;
  return out;
}

/// Replaces each condition with the null slot with probability p_uncond; returns how many were nulled.
inline int apply_condition_dropout(std::vector<int>& cond, double p_uncond, Rng& rng) {
  require(p_uncond >= 0.0 && p_uncond <= 1.0, ErrorKind::InvalidArgument, "p_uncond must lie in [0, 1]");
  std::bernoulli_distribution drop(p_uncond);
  int nulled = 0;
  for (int& c : cond)
    if (drop(rng)) {
      c = kNullCondition;
      ++nulled;
    }
  return nulled;
}

struct CfgStepResult {
  LossBreakdown loss;
  int nulled = 0;
  int conditioned = 0;
  double grad_norm = 0.0;
};

/// One optimizer step on a batch whose conditions are dropped to null with probability p_uncond.
inline CfgStepResult cfg_train_step(JointBatch batch, const LossWeights& weights, FlowModels& models, FlowGrads& grads,
                                    AdamState& opt, const AdamConfig& cfg, double p_uncond, Rng& rng,
                                    NormConvention con_norm = NormConvention::Squared) {
  CfgStepResult r;
  batch.for_each_condition_list([&](std::vector<int>& c) {
    r.conditioned += static_cast<int>(c.size());
    r.nulled += apply_condition_dropout(c, p_uncond, rng);
  });
  r.conditioned -= r.nulled;
  grads.set_zero();
  r.loss = total_loss(batch, weights, models, &grads, con_norm);
  r.grad_norm = adam_step(models.params(), grads.tensors(), opt, cfg);
  return r;
}

}  // namespace mmflow

#endif  // MMFLOW_NN_TRAIN_HPP
