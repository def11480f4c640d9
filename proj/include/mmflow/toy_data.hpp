#ifndef MMFLOW_TOY_DATA_HPP
#define MMFLOW_TOY_DATA_HPP

// Small synthetic datasets for exercising each flow family.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <vector>

#include "mmflow/flows_cont.hpp"
#include "mmflow/geom3d.hpp"
#include "mmflow/rng.hpp"
#include "mmflow/surface.hpp"

namespace mmflow {

/// Mean of component k: radius * (cos 45k deg, sin 45k deg).
inline Eigen::Vector2d eight_gaussian_mean(int k, double radius = 1.0) {
  const double a = k * std::numbers::pi / 4.0;
  return radius * Eigen::Vector2d(std::cos(a), std::sin(a));
}

/// 2 x n samples from an equal-weight mixture of eight isotropic Gaussians.
inline Eigen::MatrixXd sample_eight_gaussians(int n, Rng& rng, double radius = 1.0, double stddev = 0.1) {
  std::uniform_int_distribution<int> comp(0, 7);
  Eigen::MatrixXd out(2, n);
  for (int j = 0; j < n; ++j) {
    const Eigen::Vector2d m = eight_gaussian_mean(comp(rng), radius);
    out(0, j) = m.x() + stddev * standard_normal(rng);
    out(1, j) = m.y() + stddev * standard_normal(rng);
  }
  return out;
}

/// Fixed rotations used as mode centers, derived from a dedicated stream.
inline std::vector<Rotation> so3_mode_centers(int k, std::uint64_t seed) {
  Rng rng = make_stream(seed, "so3-centers");
  std::vector<Rotation> out;
  for (int i = 0; i < k; ++i) out.push_back(sample_uniform_rotation(rng));
  return out;
}

/// center * Exp(stddev * gaussian) around a uniformly chosen center.
inline std::vector<Rotation> sample_so3_targets(int n, const std::vector<Rotation>& centers, Rng& rng,
                                                double stddev = 0.1) {
  require(!centers.empty(), ErrorKind::EmptySet, "no rotation centers");
  std::uniform_int_distribution<std::size_t> pick(0, centers.size() - 1);
  std::vector<Rotation> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Rotation& c = centers[pick(rng)];
    const RotVec v(stddev * standard_normal(rng), stddev * standard_normal(rng), stddev * standard_normal(rng));
    out.push_back(exp_map(c, v));
  }
  return out;
}

/// Generator distribution over 20 symbols: p_k proportional to 1 + (k mod 5).
inline std::vector<double> toy_multinomial() {
  std::vector<double> p(kNumResidueTypes);
  double z = 0.0;
  for (int k = 0; k < kNumResidueTypes; ++k) z += (p[k] = 1.0 + k % 5);
  for (double& v : p) v /= z;
  return p;
}

inline std::vector<int> sample_categorical(int n, const std::vector<double>& probs, Rng& rng) {
  std::discrete_distribution<int> d(probs.begin(), probs.end());
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int& v : out) v = d(rng);
  return out;
}

/// Torsion vectors (D angles, wrapped to [0, 2pi)) scattered around fixed means.
inline Eigen::MatrixXd sample_torsions(int n, int dims, Rng& rng, double stddev = 0.2) {
  Eigen::MatrixXd out(dims, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < dims; ++i) {
      const double mean = (i % 2 == 0) ? -1.0 : 2.2;
      out(i, j) = TorusAngle(mean + stddev * standard_normal(rng)).value();
    }
  return out;
}

/// Two separated clusters; label 0 sits at (+offset, 0), label 1 at (-offset, 0).
struct ConditionalToy {
  Eigen::MatrixXd points;
  std::vector<int> label;
};

inline Eigen::Vector2d conditional_cluster_mean(int label, double offset = 3.0) {
  return Eigen::Vector2d(label == 0 ? offset : -offset, 0.0);
}

inline ConditionalToy sample_conditional_clusters(int n, Rng& rng, double offset = 3.0, double stddev = 0.3) {
  ConditionalToy out{Eigen::MatrixXd(2, n), std::vector<int>(static_cast<std::size_t>(n))};
  std::bernoulli_distribution coin(0.5);
  for (int j = 0; j < n; ++j) {
    const int l = coin(rng) ? 1 : 0;
    out.label[j] = l;
    out.points.col(j) = conditional_cluster_mean(l, offset) +
                        stddev * Eigen::Vector2d(standard_normal(rng), standard_normal(rng));
  }
  return out;
}

/// Backbone-like chain: N, CA, C, O per residue along a jittered helix, with random residue types and charges.
inline std::vector<Atom> synthetic_peptide_atoms(int residues, Rng& rng) {
  require(residues >= 1, ErrorKind::InvalidArgument, "need at least one residue");
  std::uniform_int_distribution<int> type(0, kNumResidueTypes - 1);
  std::vector<Atom> atoms;
  const double rise = 1.5, radius = 2.3, turn = 100.0 * std::numbers::pi / 180.0;
  for (int r = 0; r < residues; ++r) {
    const int t = type(rng);
    const double a = r * turn;
    const Vec3 ca(radius * std::cos(a), radius * std::sin(a), rise * r);
    const Vec3 radial(std::cos(a), std::sin(a), 0.0);
    const Vec3 tangent(-std::sin(a), std::cos(a), 0.0);
    const double q = 5.0 * standard_normal(rng);
    auto add = [&](Element e, const Vec3& p, double vdw, bool calpha) {
      const Vec3 jitter(0.05 * standard_normal(rng), 0.05 * standard_normal(rng), 0.05 * standard_normal(rng));
      atoms.push_back({p + jitter, e, vdw, r, t, calpha, q});
    };
    add(Element::N, ca - 1.2 * tangent - Vec3(0, 0, 0.5), 1.55, false);
    add(Element::C, ca, 1.7, true);
    add(Element::C, ca + 1.2 * tangent + Vec3(0, 0, 0.5), 1.7, false);
    add(Element::O, ca + 1.4 * tangent + 1.2 * radial + Vec3(0, 0, 0.5), 1.52, false);
  }
  return atoms;
}

}  // namespace mmflow

#endif  // MMFLOW_TOY_DATA_HPP
