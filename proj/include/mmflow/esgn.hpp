#ifndef MMFLOW_ESGN_HPP
#define MMFLOW_ESGN_HPP

// Equivariant message passing over a two-part surface point graph: the
// peptide surface (mobile) and the receptor surface (fixed context).
//
// Nodes are indexed peptide first, then receptor. Edges j -> i are stored
// sorted by (receiver, sender); all aggregation follows that order.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "mmflow/error.hpp"
#include "mmflow/geom3d.hpp"
#include "mmflow/mlp.hpp"
#include "mmflow/neighbor_grid.hpp"
#include "mmflow/surface.hpp"

namespace mmflow {

struct Edge {
  int src;
  int dst;

  friend bool operator==(const Edge&, const Edge&) = default;
  friend bool operator<(const Edge& a, const Edge& b) { return a.dst != b.dst ? a.dst < b.dst : a.src < b.src; }
};

struct SurfaceGraph {
  int num_pep = 0;
  int num_rec = 0;
  double cutoff = 0.0;
  std::vector<Edge> edges_pep;
  std::vector<Edge> edges_rec;
  std::vector<Edge> edges_inter;

  int size() const { return num_pep + num_rec; }
  bool is_pep(int i) const { return i < num_pep; }
};

/// Connects every ordered pair of distinct nodes within `cutoff` (inclusive).
inline SurfaceGraph build_graph(std::span<const Vec3> pep, std::span<const Vec3> rec, double cutoff) {
  require(cutoff > 0.0, ErrorKind::InvalidArgument, "cutoff must be positive");
  SurfaceGraph g;
  g.num_pep = static_cast<int>(pep.size());
  g.num_rec = static_cast<int>(rec.size());
  g.cutoff = cutoff;
  std::vector<Vec3> all(pep.begin(), pep.end());
  all.insert(all.end(), rec.begin(), rec.end());
  if (all.empty()) return g;
  const NeighborGrid grid(all, cutoff);
  for (int i = 0; i < g.size(); ++i) {
    for (std::size_t js : grid.within(all[i], cutoff)) {
      const int j = static_cast<int>(js);
      if (j == i) continue;
      const Edge e{j, i};
      if (g.is_pep(i) != g.is_pep(j))
        g.edges_inter.push_back(e);
      else if (g.is_pep(i))
        g.edges_pep.push_back(e);
      else
        g.edges_rec.push_back(e);
    }
  }
  std::sort(g.edges_pep.begin(), g.edges_pep.end());
  std::sort(g.edges_rec.begin(), g.edges_rec.end());
  std::sort(g.edges_inter.begin(), g.edges_inter.end());
  return g;
}

inline std::vector<Vec3> positions_of(std::span<const SurfacePoint> pts) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(p.pos);
  return out;
}

inline SurfaceGraph build_graph(std::span<const SurfacePoint> pep, std::span<const SurfacePoint> rec, double cutoff) {
  const auto a = positions_of(pep);
  const auto b = positions_of(rec);
  return build_graph(std::span<const Vec3>(a), std::span<const Vec3>(b), cutoff);
}

struct EdgeBasisConfig {
  double cutoff = 4.0;
  int num_rbf = 16;
  int num_legendre = 4;
  int num_bessel = 4;
  /// Feed squared distances to the radial bases instead of distances.
  bool squared_distance = false;

  int sbf_size() const { return num_legendre * num_bessel; }
};

struct GeometricEdgeFeatures {
  VecX rbf;
  VecX sbf_i;
  VecX sbf_j;
};

/// Gaussians on num_rbf centers evenly spaced over [0, cutoff], width = center spacing.
inline VecX rbf_features(double d, const EdgeBasisConfig& cfg) {
  require(cfg.num_rbf >= 2, ErrorKind::InvalidArgument, "need at least two radial centers");
  const double spacing = cfg.cutoff / (cfg.num_rbf - 1);
  VecX out(cfg.num_rbf);
  for (int k = 0; k < cfg.num_rbf; ++k) {
    const double z = (d - k * spacing) / spacing;
    out[k] = std::exp(-0.5 * z * z);
  }
  return out;
}

inline double legendre(int l, double x) {
  if (l == 0) return 1.0;
  double p0 = 1.0, p1 = x;
  for (int k = 2; k <= l; ++k) {
    const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
    p0 = p1;
    p1 = p2;
  }
  return p1;
}

/// Legendre(cos angle) x spherical-Bessel-style radial basis, flattened l-major.
inline VecX sbf_features(double cos_angle, double d, const EdgeBasisConfig& cfg) {
  VecX out(cfg.sbf_size());
  const double c = cfg.cutoff;
  const double norm = std::sqrt(2.0 / c);
  for (int l = 0; l < cfg.num_legendre; ++l) {
    const double p = legendre(l, cos_angle);
    for (int k = 0; k < cfg.num_bessel; ++k)
      out[l * cfg.num_bessel + k] = p * norm * std::sin((k + 1) * std::numbers::pi * d / c) / d;
  }
  return out;
}

/// Invariant features of the directed pair (j -> i) from positions and unit normals.
inline GeometricEdgeFeatures edge_features(const Vec3& xi, const Vec3& ni, const Vec3& xj, const Vec3& nj,
                                           const EdgeBasisConfig& cfg) {
  const Vec3 xij = xi - xj;
  const double d = xij.norm();
  if (!(d > 0.0)) fail(ErrorKind::CoincidentPoints, "edge endpoints coincide");
  const double radial = cfg.squared_distance ? d * d : d;
  const double cos_i = std::clamp(ni.dot(xij) / d, -1.0, 1.0);
  const double cos_j = std::clamp(nj.dot(-xij) / d, -1.0, 1.0);
  return {rbf_features(radial, cfg), sbf_features(cos_i, radial, cfg), sbf_features(cos_j, radial, cfg)};
}

struct EsgnConfig {
  EdgeBasisConfig basis;
  int feature_dim = 16;
  int message_dim = 16;
  int hidden = 32;
  int num_layers = 2;
  Activation activation = Activation::SiLU;
};

struct EsgnLayerParams {
  Mlp f_m;          // [h_i; h_j; rbf; sbf_i; sbf_j] -> message
  DenseLayer w_m;   // message -> softmax score (1 x message_dim)
  Mlp f_q;          // h -> query
  Mlp f_k;          // h -> key
  DenseLayer gate;  // rbf -> feature_dim, followed by a sigmoid
  Mlp f_h;          // [h_i; sum of reweighted messages; sum of inter messages] -> h
  Mlp f_x_intra;    // message -> scalar
  Mlp f_x_inter;    // inter message -> scalar
};

struct EsgnParams {
  EsgnConfig cfg;
  Mlp f_e;  // one-hot surface category -> h
  std::vector<EsgnLayerParams> layers;

  static EsgnParams init(const EsgnConfig& cfg, Rng& rng, double coord_scale = 0.1) {
    require(cfg.num_layers >= 1, ErrorKind::InvalidArgument, "need at least one layer");
    const int f = cfg.feature_dim, m = cfg.message_dim, hd = cfg.hidden;
    const int edge_in = 2 * f + cfg.basis.num_rbf + 2 * cfg.basis.sbf_size();
    auto dense = [&](int out, int in) {
      const Mlp tmp = Mlp::init({in, out}, cfg.activation, rng);
      return tmp.layers().front();
    };
    EsgnParams p;
    p.cfg = cfg;
    p.f_e = Mlp::init({kNumUpsilon, hd, f}, cfg.activation, rng);
    for (int l = 0; l < cfg.num_layers; ++l) {
      EsgnLayerParams lp;
      lp.f_m = Mlp::init({edge_in, hd, m}, cfg.activation, rng);
      lp.w_m = dense(1, m);
      lp.f_q = Mlp::init({f, hd, f}, cfg.activation, rng);
      lp.f_k = Mlp::init({f, hd, f}, cfg.activation, rng);
      lp.gate = dense(f, cfg.basis.num_rbf);
      lp.f_h = Mlp::init({2 * f + m, hd, f}, cfg.activation, rng);
      lp.f_x_intra = Mlp::init({m, hd, 1}, cfg.activation, rng, coord_scale);
      lp.f_x_inter = Mlp::init({f, hd, 1}, cfg.activation, rng, coord_scale);
      p.layers.push_back(std::move(lp));
    }
    return p;
  }
};

struct EsgnState {
  MatX h;                    // feature_dim x nodes
  std::vector<Vec3> x;       // node coordinates
  std::vector<Vec3> normal;  // unit normals, carried unchanged
  int layer = 0;
};

struct IntraMessages {
  std::vector<Edge> edges;  // pep edges then rec edges, each sorted
  MatX raw;                 // message_dim x edges
  MatX reweighted;
  std::vector<double> weight;
};

struct InterMessages {
  MatX mu;  // feature_dim x edges
  std::vector<double> attention;
};

namespace detail {

/// Softmax of `score` within runs of equal receivers (edges sorted by receiver).
inline std::vector<double> grouped_softmax(const std::vector<Edge>& edges, const std::vector<double>& score) {
  std::vector<double> w(edges.size());
  for (std::size_t a = 0; a < edges.size();) {
    std::size_t b = a;
    while (b < edges.size() && edges[b].dst == edges[a].dst) ++b;
    double mx = score[a];
    for (std::size_t k = a; k < b; ++k) mx = std::max(mx, score[k]);
    double z = 0.0;
    for (std::size_t k = a; k < b; ++k) z += (w[k] = std::exp(score[k] - mx));
    for (std::size_t k = a; k < b; ++k) w[k] /= z;
    a = b;
  }
  return w;
}

inline MatX apply_dense(const DenseLayer& d, const MatX& x) {
  MatX z = d.w * x;
  z.colwise() += d.b.col(0);
  return z;
}

}  // namespace detail

inline IntraMessages intra_messages(const EsgnState& s, const SurfaceGraph& g, const EsgnLayerParams& p,
                                    const EsgnConfig& cfg) {
  IntraMessages out;
  out.edges = g.edges_pep;
  out.edges.insert(out.edges.end(), g.edges_rec.begin(), g.edges_rec.end());
  const int f = cfg.feature_dim;
  const int nb = cfg.basis.num_rbf, ns = cfg.basis.sbf_size();
  MatX in(2 * f + nb + 2 * ns, static_cast<Eigen::Index>(out.edges.size()));
  for (std::size_t e = 0; e < out.edges.size(); ++e) {
    const auto [j, i] = out.edges[e];
    const auto feat = edge_features(s.x[i], s.normal[i], s.x[j], s.normal[j], cfg.basis);
    auto col = in.col(static_cast<Eigen::Index>(e));
    col.segment(0, f) = s.h.col(i);
    col.segment(f, f) = s.h.col(j);
    col.segment(2 * f, nb) = feat.rbf;
    col.segment(2 * f + nb, ns) = feat.sbf_i;
    col.segment(2 * f + nb + ns, ns) = feat.sbf_j;
  }
  out.raw = out.edges.empty() ? MatX(cfg.message_dim, 0) : p.f_m.forward(in);
  std::vector<double> score(out.edges.size());
  if (!out.edges.empty()) {
    const MatX sc = detail::apply_dense(p.w_m, out.raw);
    for (std::size_t e = 0; e < score.size(); ++e) score[e] = sc(0, static_cast<Eigen::Index>(e));
  }
  out.weight = detail::grouped_softmax(out.edges, score);
  out.reweighted = out.raw;
  for (std::size_t e = 0; e < out.weight.size(); ++e) out.reweighted.col(static_cast<Eigen::Index>(e)) *= out.weight[e];
  return out;
}

inline InterMessages inter_messages(const EsgnState& s, const SurfaceGraph& g, const EsgnLayerParams& p,
                                    const EsgnConfig& cfg) {
  InterMessages out;
  const auto& edges = g.edges_inter;
  const Eigen::Index ne = static_cast<Eigen::Index>(edges.size());
  out.mu = MatX(cfg.feature_dim, ne);
  if (edges.empty()) return out;
  const MatX q = p.f_q.forward(s.h);
  const MatX k = p.f_k.forward(s.h);
  std::vector<double> score(edges.size());
  MatX rbf(cfg.basis.num_rbf, ne);
  for (Eigen::Index e = 0; e < ne; ++e) {
    const auto [j, i] = edges[e];
    score[e] = q.col(i).dot(k.col(j));
    const double d = (s.x[i] - s.x[j]).norm();
    rbf.col(e) = rbf_features(cfg.basis.squared_distance ? d * d : d, cfg.basis);
  }
  out.attention = detail::grouped_softmax(edges, score);
  const MatX gate = detail::apply_dense(p.gate, rbf).unaryExpr([](double z) { return sigmoid(z); });
  for (Eigen::Index e = 0; e < ne; ++e)
    out.mu.col(e) = out.attention[e] * s.h.col(edges[e].src).cwiseProduct(gate.col(e));
  return out;
}

struct EsgnLayerTrace {
  SurfaceGraph graph;
  IntraMessages intra;
  InterMessages inter;
};

/// Updates all features; moves peptide coordinates only. Nodes without
/// neighbours of a kind skip that coordinate term.
inline EsgnState esgn_layer(const EsgnState& s, const SurfaceGraph& g, const EsgnLayerParams& p, const EsgnConfig& cfg,
                            EsgnLayerTrace* trace = nullptr) {
  const int n = g.size();
  require(static_cast<int>(s.x.size()) == n && s.h.cols() == n, ErrorKind::ShapeMismatch,
          "graph does not match the state");
  const int f = cfg.feature_dim, m = cfg.message_dim;
  IntraMessages intra = intra_messages(s, g, p, cfg);
  InterMessages inter = inter_messages(s, g, p, cfg);

  MatX agg = MatX::Zero(2 * f + m, n);
  agg.topRows(f) = s.h;
  std::vector<Vec3> dx_intra(n, Vec3::Zero()), dx_inter(n, Vec3::Zero());
  std::vector<int> n_intra(n, 0), n_inter(n, 0);

  const MatX sx_intra = intra.edges.empty() ? MatX(1, 0) : p.f_x_intra.forward(intra.raw);
  for (std::size_t e = 0; e < intra.edges.size(); ++e) {
    const auto [j, i] = intra.edges[e];
    const Eigen::Index ec = static_cast<Eigen::Index>(e);
    agg.col(i).segment(f, m) += intra.reweighted.col(ec);
    dx_intra[i] += sx_intra(0, ec) * (s.x[i] - s.x[j]);
    ++n_intra[i];
  }
  const MatX sx_inter = g.edges_inter.empty() ? MatX(1, 0) : p.f_x_inter.forward(inter.mu);
  for (std::size_t e = 0; e < g.edges_inter.size(); ++e) {
    const auto [j, i] = g.edges_inter[e];
    const Eigen::Index ec = static_cast<Eigen::Index>(e);
    agg.col(i).segment(f + m, f) += inter.mu.col(ec);
    dx_inter[i] += sx_inter(0, ec) * (s.x[i] - s.x[j]);
    ++n_inter[i];
  }

  EsgnState out;
  out.h = p.f_h.forward(agg);
  out.x = s.x;
  out.normal = s.normal;
  out.layer = s.layer + 1;
  for (int i = 0; i < g.num_pep; ++i) {
    if (n_intra[i] > 0) out.x[i] += dx_intra[i] / n_intra[i];
    if (n_inter[i] > 0) out.x[i] += dx_inter[i] / n_inter[i];
  }
  if (trace) *trace = {g, std::move(intra), std::move(inter)};
  return out;
}

inline EsgnState esgn_init(std::span<const SurfacePoint> pep, std::span<const SurfacePoint> rec, const EsgnParams& p) {
  const Eigen::Index n = static_cast<Eigen::Index>(pep.size() + rec.size());
  MatX onehot = MatX::Zero(kNumUpsilon, n);
  EsgnState s;
  Eigen::Index i = 0;
  for (auto part : {pep, rec})
    for (const SurfacePoint& q : part) {
      onehot(static_cast<int>(q.upsilon), i++) = 1.0;
      s.x.push_back(q.pos);
      s.normal.push_back(q.normal);
    }
  s.h = n > 0 ? p.f_e.forward(onehot) : MatX(p.cfg.feature_dim, 0);
  return s;
}

/// Embeds categories, then runs every layer, rebuilding the graph from the current coordinates first.
inline EsgnState esgn_forward(std::span<const SurfacePoint> pep, std::span<const SurfacePoint> rec,
                              const EsgnParams& p, std::vector<EsgnLayerTrace>* traces = nullptr) {
  require(!p.layers.empty(), ErrorKind::InvalidArgument, "need at least one layer");
  EsgnState s = esgn_init(pep, rec, p);
  const auto num_pep = pep.size();
  if (traces) traces->clear();
  for (const EsgnLayerParams& lp : p.layers) {
    const std::span<const Vec3> all(s.x);
    const SurfaceGraph g = build_graph(all.first(num_pep), all.subspan(num_pep), p.cfg.basis.cutoff);
    EsgnLayerTrace tr;
    s = esgn_layer(s, g, lp, p.cfg, traces ? &tr : nullptr);
    if (traces) traces->push_back(std::move(tr));
  }
  return s;
}

}  // namespace mmflow

#endif  // MMFLOW_ESGN_HPP
