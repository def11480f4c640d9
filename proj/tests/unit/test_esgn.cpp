#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mmflow/esgn.hpp"
#include "test_util.hpp"

using namespace mmflow;
using mmflow::testing::random_vec;

namespace {

std::vector<SurfacePoint> random_points(int n, Rng& rng, double box, const Vec3& offset = Vec3::Zero()) {
  std::vector<SurfacePoint> out;
  for (int i = 0; i < n; ++i) {
    SurfacePoint p;
    p.pos = offset + box * Vec3(uniform01(rng), uniform01(rng), uniform01(rng));
    p.normal = random_vec(rng).normalized();
    p.upsilon = static_cast<Upsilon>(static_cast<int>(uniform01(rng) * 3));
    out.push_back(p);
  }
  return out;
}

std::set<std::pair<int, int>> brute_edges(const std::vector<Vec3>& all, int num_pep, double cutoff, int which) {
  std::set<std::pair<int, int>> out;
  const int n = static_cast<int>(all.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j || (all[i] - all[j]).norm() > cutoff) continue;
      const bool pi = i < num_pep, pj = j < num_pep;
      const int kind = pi != pj ? 2 : (pi ? 0 : 1);
      if (kind == which) out.insert({j, i});
    }
  return out;
}

std::set<std::pair<int, int>> as_set(const std::vector<Edge>& e) {
  std::set<std::pair<int, int>> out;
  for (const Edge& x : e) out.insert({x.src, x.dst});
  return out;
}

void expect_graph_matches_scan(const SurfaceGraph& g, const std::vector<Vec3>& all) {
  EXPECT_EQ(as_set(g.edges_pep), brute_edges(all, g.num_pep, g.cutoff, 0));
  EXPECT_EQ(as_set(g.edges_rec), brute_edges(all, g.num_pep, g.cutoff, 1));
  EXPECT_EQ(as_set(g.edges_inter), brute_edges(all, g.num_pep, g.cutoff, 2));
}

EsgnConfig small_config(int layers = 2) {
  EsgnConfig cfg;
  cfg.num_layers = layers;
  cfg.feature_dim = 8;
  cfg.message_dim = 6;
  cfg.hidden = 16;
  return cfg;
}

void zero_last_layer(Mlp& m) {
  m.layers().back().w.setZero();
  m.layers().back().b.setZero();
}

}  // namespace

TEST(EsgnGraph, FarPairHasNoEdge) {
  const std::vector<Vec3> pep{Vec3::Zero(), Vec3(8, 0, 0)};
  const auto g = build_graph(std::span<const Vec3>(pep), std::span<const Vec3>(), 4.0);
  EXPECT_TRUE(g.edges_pep.empty());
}

TEST(EsgnGraph, ClosePairConnectedBothWays) {
  const std::vector<Vec3> pep{Vec3::Zero(), Vec3(2, 0, 0)};
  const auto g = build_graph(std::span<const Vec3>(pep), std::span<const Vec3>(), 4.0);
  ASSERT_EQ(g.edges_pep.size(), 2u);
  EXPECT_EQ(as_set(g.edges_pep), (std::set<std::pair<int, int>>{{0, 1}, {1, 0}}));
}

TEST(EsgnGraph, MatchesBruteForceScan) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto pep = random_points(60, rng, 12.0);
    const auto rec = random_points(80, rng, 12.0, Vec3(6, 0, 0));
    const auto g = build_graph(std::span<const SurfacePoint>(pep), std::span<const SurfacePoint>(rec), 3.0);
    auto all = positions_of(pep);
    const auto r = positions_of(rec);
    all.insert(all.end(), r.begin(), r.end());
    expect_graph_matches_scan(g, all);
    for (const Edge& e : g.edges_inter) EXPECT_NE(g.is_pep(e.src), g.is_pep(e.dst));
  }
}

TEST(EsgnGraph, RejectsNonPositiveCutoff) {
  EXPECT_THROW(build_graph(std::span<const Vec3>(), std::span<const Vec3>(), 0.0), Error);
}

TEST(EsgnEdges, RbfPeaksAtCenter) {
  EdgeBasisConfig cfg;
  const double spacing = cfg.cutoff / (cfg.num_rbf - 1);
  for (int k = 0; k < cfg.num_rbf; ++k) EXPECT_EQ(rbf_features(k * spacing, cfg)[k], 1.0);
}

TEST(EsgnEdges, LegendreAtOne) {
  for (int l = 0; l < 8; ++l) EXPECT_NEAR(legendre(l, 1.0), 1.0, 1e-15);
  EXPECT_NEAR(legendre(2, 0.5), -0.125, 1e-15);
  EXPECT_NEAR(legendre(3, 0.5), -0.4375, 1e-15);
}

TEST(EsgnEdges, AngleZeroGivesUnitLegendre) {
  EdgeBasisConfig cfg;
  const Vec3 xi(1, 0, 0), xj(0, 0, 0);
  const auto f = edge_features(xi, Vec3(1, 0, 0), xj, Vec3(-1, 0, 0), cfg);
  for (int l = 1; l < cfg.num_legendre; ++l)
    for (int k = 0; k < cfg.num_bessel; ++k) {
      EXPECT_NEAR(f.sbf_i[l * cfg.num_bessel + k], f.sbf_i[k], 1e-15);
      EXPECT_NEAR(f.sbf_j[l * cfg.num_bessel + k], f.sbf_j[k], 1e-15);
    }
}

TEST(EsgnEdges, RigidMotionInvariance) {
  Rng rng(2);
  EdgeBasisConfig cfg;
  for (int trial = 0; trial < 50; ++trial) {
    const Vec3 xi = random_vec(rng), xj = random_vec(rng);
    const Vec3 ni = random_vec(rng).normalized(), nj = random_vec(rng).normalized();
    const Rotation r = sample_uniform_rotation(rng);
    const Vec3 v = random_vec(rng, 10.0);
    const auto a = edge_features(xi, ni, xj, nj, cfg);
    const auto b = edge_features(r * xi + v, r * ni, r * xj + v, r * nj, cfg);
    EXPECT_LT((a.rbf - b.rbf).norm(), 1e-9);
    EXPECT_LT((a.sbf_i - b.sbf_i).norm(), 1e-9);
    EXPECT_LT((a.sbf_j - b.sbf_j).norm(), 1e-9);
  }
}

TEST(EsgnEdges, CoincidentPointsRejected) {
  try {
    edge_features(Vec3::Ones(), Vec3::UnitZ(), Vec3::Ones(), Vec3::UnitZ(), EdgeBasisConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CoincidentPoints);
  }
}

TEST(EsgnMessages, SingleNeighborWeightIsOne) {
  Rng rng(3);
  const EsgnConfig cfg = small_config(1);
  const auto p = EsgnParams::init(cfg, rng);
  std::vector<SurfacePoint> pep(2), rec(1);
  pep[1].pos = Vec3(1.5, 0, 0);
  rec[0].pos = Vec3(0, 2.0, 0);
  rec[0].normal = Vec3::UnitX();
  const auto s = esgn_init(pep, rec, p);
  const auto g = build_graph(std::span<const SurfacePoint>(pep), std::span<const SurfacePoint>(rec), cfg.basis.cutoff);
  const auto intra = intra_messages(s, g, p.layers[0], cfg);
  ASSERT_EQ(intra.edges.size(), 2u);
  for (double w : intra.weight) EXPECT_EQ(w, 1.0);
  // Each pep node sees the one receptor node; the receptor node sees both pep nodes.
  const auto inter = inter_messages(s, g, p.layers[0], cfg);
  ASSERT_EQ(g.edges_inter.size(), 4u);
  for (std::size_t e = 0; e < g.edges_inter.size(); ++e)
    if (g.is_pep(g.edges_inter[e].dst)) EXPECT_EQ(inter.attention[e], 1.0);
}

TEST(EsgnMessages, WeightsSumToOnePerReceiver) {
  Rng rng(4);
  const EsgnConfig cfg = small_config(1);
  const auto p = EsgnParams::init(cfg, rng);
  const auto pep = random_points(40, rng, 8.0);
  const auto rec = random_points(40, rng, 8.0, Vec3(4, 0, 0));
  const auto s = esgn_init(pep, rec, p);
  const auto g = build_graph(std::span<const SurfacePoint>(pep), std::span<const SurfacePoint>(rec), cfg.basis.cutoff);
  const auto intra = intra_messages(s, g, p.layers[0], cfg);
  const auto inter = inter_messages(s, g, p.layers[0], cfg);
  std::vector<double> sum_intra(g.size(), 0.0), sum_inter(g.size(), 0.0);
  for (std::size_t e = 0; e < intra.edges.size(); ++e) sum_intra[intra.edges[e].dst] += intra.weight[e];
  for (std::size_t e = 0; e < g.edges_inter.size(); ++e) sum_inter[g.edges_inter[e].dst] += inter.attention[e];
  int checked = 0;
  for (int i = 0; i < g.size(); ++i) {
    for (double sum : {sum_intra[i], sum_inter[i]}) {
      if (sum == 0.0) continue;
      EXPECT_NEAR(sum, 1.0, 1e-12);
      ++checked;
    }
  }
  EXPECT_GT(checked, 40);
}

TEST(EsgnMessages, InterMessagesInvariantToRigidMotion) {
  Rng rng(5);
  const EsgnConfig cfg = small_config(1);
  const auto p = EsgnParams::init(cfg, rng);
  const auto pep = random_points(20, rng, 6.0);
  const auto rec = random_points(20, rng, 6.0, Vec3(3, 0, 0));
  auto s = esgn_init(pep, rec, p);
  const auto g = build_graph(std::span<const SurfacePoint>(pep), std::span<const SurfacePoint>(rec), cfg.basis.cutoff);
  const auto a = inter_messages(s, g, p.layers[0], cfg);
  const Rotation r = sample_uniform_rotation(rng);
  for (auto& x : s.x) x = r * x + Vec3(1, 2, 3);
  const auto b = inter_messages(s, g, p.layers[0], cfg);
  ASSERT_EQ(a.attention.size(), b.attention.size());
  for (std::size_t e = 0; e < a.attention.size(); ++e) EXPECT_EQ(a.attention[e], b.attention[e]);
  EXPECT_LT((a.mu - b.mu).norm(), 1e-12);
}

TEST(EsgnMessages, NeighborOrderDoesNotChangeOutput) {
  Rng rng(6);
  const EsgnConfig cfg = small_config(1);
  const auto p = EsgnParams::init(cfg, rng);
  const auto pep = random_points(25, rng, 7.0);
  const auto rec = random_points(30, rng, 7.0, Vec3(3, 0, 0));
  std::vector<int> perm_p(pep.size()), perm_r(rec.size());
  std::iota(perm_p.begin(), perm_p.end(), 0);
  std::iota(perm_r.begin(), perm_r.end(), 0);
  std::shuffle(perm_p.begin(), perm_p.end(), rng);
  std::shuffle(perm_r.begin(), perm_r.end(), rng);
  std::vector<SurfacePoint> pep2, rec2;
  for (int k : perm_p) pep2.push_back(pep[k]);
  for (int k : perm_r) rec2.push_back(rec[k]);
  const auto a = esgn_forward(pep, rec, p);
  const auto b = esgn_forward(pep2, rec2, p);
  const int np = static_cast<int>(pep.size());
  for (int i = 0; i < np; ++i) {
    EXPECT_LT((b.h.col(i) - a.h.col(perm_p[i])).norm(), 1e-12);
    EXPECT_LT((b.x[i] - a.x[perm_p[i]]).norm(), 1e-12);
  }
  for (int i = 0; i < static_cast<int>(rec.size()); ++i)
    EXPECT_LT((b.h.col(np + i) - a.h.col(np + perm_r[i])).norm(), 1e-12);
}

TEST(EsgnLayer, ZeroCoordinateGatesFreezeCoordinates) {
  Rng rng(7);
  const EsgnConfig cfg = small_config(2);
  auto p = EsgnParams::init(cfg, rng);
  for (auto& lp : p.layers) {
    zero_last_layer(lp.f_x_intra);
    zero_last_layer(lp.f_x_inter);
  }
  const auto pep = random_points(30, rng, 6.0);
  const auto rec = random_points(30, rng, 6.0, Vec3(3, 0, 0));
  const auto out = esgn_forward(pep, rec, p);
  for (std::size_t i = 0; i < pep.size(); ++i) EXPECT_EQ(out.x[i], pep[i].pos);
}

TEST(EsgnLayer, IsolatedNode) {
  Rng rng(8);
  const EsgnConfig cfg = small_config(1);
  const auto p = EsgnParams::init(cfg, rng);
  std::vector<SurfacePoint> pep(1);
  pep[0].pos = Vec3(1, 2, 3);
  pep[0].upsilon = Upsilon::Acceptor;
  const auto s = esgn_init(pep, {}, p);
  const auto out = esgn_forward(pep, {}, p);
  EXPECT_EQ(out.x[0], pep[0].pos);
  MatX agg = MatX::Zero(2 * cfg.feature_dim + cfg.message_dim, 1);
  agg.topRows(cfg.feature_dim) = s.h;
  EXPECT_LT((out.h - p.layers[0].f_h.forward(agg)).norm(), 1e-15);
}

TEST(EsgnLayer, ReceptorStaysFixed) {
  Rng rng(9);
  const auto p = EsgnParams::init(small_config(2), rng, 1.0);
  const auto pep = random_points(20, rng, 5.0);
  const auto rec = random_points(20, rng, 5.0, Vec3(2, 0, 0));
  const auto out = esgn_forward(pep, rec, p);
  for (std::size_t i = 0; i < rec.size(); ++i) EXPECT_EQ(out.x[pep.size() + i], rec[i].pos);
  double moved = 0.0;
  for (std::size_t i = 0; i < pep.size(); ++i) moved += (out.x[i] - pep[i].pos).norm();
  EXPECT_GT(moved, 0.0);
}

TEST(EsgnLayer, SingleLayerDependsOnlyOnNeighborFeatures) {
  Rng rng(10);
  const EsgnConfig cfg = small_config(1);
  const auto p = EsgnParams::init(cfg, rng, 1.0);
  const auto pep = random_points(40, rng, 14.0);
  const auto rec = random_points(40, rng, 14.0, Vec3(5, 0, 0));
  const auto s = esgn_init(pep, rec, p);
  const auto g = build_graph(std::span<const SurfacePoint>(pep), std::span<const SurfacePoint>(rec), cfg.basis.cutoff);
  const auto ref = esgn_layer(s, g, p.layers[0], cfg);
  for (int i : {0, 7, 19}) {
    auto z = s;
    for (int j = 0; j < g.size(); ++j)
      if ((s.x[j] - s.x[i]).norm() > cfg.basis.cutoff) z.h.col(j).setZero();
    const auto out = esgn_layer(z, g, p.layers[0], cfg);
    EXPECT_LT((out.h.col(i) - ref.h.col(i)).norm(), 1e-9);
    EXPECT_LT((out.x[i] - ref.x[i]).norm(), 1e-9);
  }
}

TEST(EsgnForward, Locality) {
  Rng rng(11);
  const EsgnConfig cfg = small_config(2);
  const auto p = EsgnParams::init(cfg, rng);
  const auto pep = random_points(60, rng, 24.0);
  const auto rec = random_points(60, rng, 24.0);
  const auto ref = esgn_forward(pep, rec, p);
  // Coordinates move by well under the slack below, so influence stays within L hops.
  double max_move = 0.0;
  for (std::size_t i = 0; i < pep.size(); ++i) max_move = std::max(max_move, (ref.x[i] - pep[i].pos).norm());
  const double reach = cfg.num_layers * (cfg.basis.cutoff + 2.0 * max_move) + 1e-6;
  for (int i : {0, 5, 11}) {
    auto pep2 = pep;
    auto rec2 = rec;
    for (auto* set : {&pep2, &rec2})
      for (auto& q : *set)
        if ((q.pos - pep[i].pos).norm() > reach) q.upsilon = q.upsilon == Upsilon::Donor ? Upsilon::Neutral : Upsilon::Donor;
    const auto out = esgn_forward(pep2, rec2, p);
    EXPECT_LT((out.h.col(i) - ref.h.col(i)).norm(), 1e-9);
    EXPECT_LT((out.x[i] - ref.x[i]).norm(), 1e-9);
  }
}

TEST(EsgnForward, SingleLayerMatchesOneStep) {
  Rng rng(12);
  const EsgnConfig cfg = small_config(1);
  const auto p = EsgnParams::init(cfg, rng);
  const auto pep = random_points(20, rng, 6.0);
  const auto rec = random_points(20, rng, 6.0, Vec3(2, 0, 0));
  const auto s = esgn_init(pep, rec, p);
  const auto g = build_graph(std::span<const SurfacePoint>(pep), std::span<const SurfacePoint>(rec), cfg.basis.cutoff);
  const auto one = esgn_layer(s, g, p.layers[0], cfg);
  const auto fwd = esgn_forward(pep, rec, p);
  EXPECT_EQ(one.h, fwd.h);
  EXPECT_EQ(one.x, fwd.x);
  EXPECT_EQ(fwd.layer, 1);
}

TEST(EsgnForward, Deterministic) {
  Rng a(13), b(13);
  const auto pa = EsgnParams::init(small_config(), a);
  const auto pb = EsgnParams::init(small_config(), b);
  Rng rng(14);
  const auto pep = random_points(20, rng, 6.0);
  const auto rec = random_points(20, rng, 6.0);
  const auto x = esgn_forward(pep, rec, pa);
  const auto y = esgn_forward(pep, rec, pb);
  EXPECT_EQ(x.h, y.h);
  EXPECT_EQ(x.x, y.x);
}

TEST(EsgnForward, GraphRebuiltFromUpdatedCoordinates) {
  Rng rng(15);
  const EsgnConfig cfg = small_config(3);
  const auto p = EsgnParams::init(cfg, rng, 2.0);
  const auto pep = random_points(30, rng, 8.0);
  const auto rec = random_points(30, rng, 8.0, Vec3(3, 0, 0));
  std::vector<EsgnLayerTrace> traces;
  const auto out = esgn_forward(pep, rec, p, &traces);
  ASSERT_EQ(traces.size(), 3u);
  // Replay to recover the coordinates entering each layer.
  auto s = esgn_init(pep, rec, p);
  for (int l = 0; l < 3; ++l) {
    expect_graph_matches_scan(traces[l].graph, s.x);
    s = esgn_layer(s, traces[l].graph, p.layers[l], cfg);
  }
  EXPECT_EQ(s.x, out.x);
}

TEST(EsgnForward, RigidMotionEquivariance) {
  Rng rng(16);
  const EsgnConfig cfg = small_config(2);
  const auto p = EsgnParams::init(cfg, rng, 1.0);
  const auto pep = random_points(30, rng, 7.0);
  const auto rec = random_points(30, rng, 7.0, Vec3(3, 0, 0));
  const auto ref = esgn_forward(pep, rec, p);
  for (int trial = 0; trial < 20; ++trial) {
    const Rotation r = sample_uniform_rotation(rng);
    const Vec3 v = random_vec(rng, 20.0);
    auto move = [&](std::vector<SurfacePoint> pts) {
      for (auto& q : pts) {
        q.pos = r * q.pos + v;
        q.normal = r * q.normal;
      }
      return pts;
    };
    const auto out = esgn_forward(move(pep), move(rec), p);
    EXPECT_LT((out.h - ref.h).cwiseAbs().maxCoeff(), 1e-7);
    for (std::size_t i = 0; i < out.x.size(); ++i) EXPECT_LT((out.x[i] - (r * ref.x[i] + v)).norm(), 1e-7);
  }
}
