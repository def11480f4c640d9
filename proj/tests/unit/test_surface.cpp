#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mmflow/surface.hpp"
#include "mmflow/toy_data.hpp"
#include "test_util.hpp"

using namespace mmflow;
using mmflow::testing::random_vec;

namespace {

Atom atom_at(const Vec3& p, Element e = Element::C, double vdw = 1.7, int type = 0) {
  Atom a;
  a.pos = p;
  a.element = e;
  a.vdw_radius = vdw;
  a.residue_type = type;
  return a;
}

std::vector<Atom> peptide(std::uint64_t seed, int residues = 5) {
  Rng rng(seed);
  return synthetic_peptide_atoms(residues, rng);
}

}  // namespace

TEST(SurfaceSampling, SingleAtomSphere) {
  const Vec3 c(1.0, -2.0, 0.5);
  const std::vector<Atom> atoms{atom_at(c, Element::C, 1.6)};
  Rng rng(1);
  const auto pts = sample_surface(atoms, 1.4, 500, rng);
  ASSERT_FALSE(pts.empty());
  for (const auto& p : pts) {
    EXPECT_NEAR((p.pos - c).norm(), 3.0, 1e-12);
    EXPECT_LT((p.normal - (p.pos - c) / 3.0).norm(), 1e-12);
    EXPECT_NEAR(p.normal.norm(), 1.0, 1e-9);
  }
}

TEST(SurfaceSampling, SingleAtomCentroid) {
  const std::vector<Atom> atoms{atom_at(Vec3::Zero(), Element::C, 1.0)};
  Rng rng(2);
  const auto pts = sample_surface(atoms, 1.0, 1000, rng);
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p.pos;
  mean /= static_cast<double>(pts.size());
  // Radius 2 sphere: per-coordinate std of a uniform point is 2/sqrt(3).
  EXPECT_LT(mean.norm(), 3.0 * 2.0 / std::sqrt(3.0 * pts.size()));
}

TEST(SurfaceSampling, CountNearTarget) {
  const auto atoms = peptide(3);
  Rng rng(3);
  const auto pts = sample_surface(atoms, 1.4, 400, rng);
  EXPECT_GT(pts.size(), 300u);
  EXPECT_LT(pts.size(), 500u);
}

TEST(SurfaceSampling, NoPointInsideAnotherSphere) {
  const std::vector<Atom> atoms{atom_at(Vec3::Zero()), atom_at(Vec3(2.0, 0, 0), Element::O, 1.5)};
  Rng rng(4);
  const double probe = 1.4;
  const auto pts = sample_surface(atoms, probe, 800, rng);
  for (const auto& p : pts)
    for (const auto& a : atoms) EXPECT_GE((p.pos - a.pos).norm(), a.vdw_radius + probe - 1e-9);
}

TEST(SurfaceSampling, PeptideRejectionAndNormals) {
  const auto atoms = peptide(5, 8);
  Rng rng(5);
  const auto pts = sample_surface(atoms, 1.4, 600, rng);
  for (const auto& p : pts) {
    EXPECT_NEAR(p.normal.norm(), 1.0, 1e-9);
    for (const auto& a : atoms) ASSERT_GE((p.pos - a.pos).norm(), a.vdw_radius + 1.4 - 1e-9);
  }
}

TEST(SurfaceSampling, EnclosedAtomContributesNoPoints) {
  // The outermost sphere always keeps some exposure, so a whole structure cannot
  // be buried; an atom swallowed by a larger one contributes nothing.
  Atom big = atom_at(Vec3::Zero()), small = atom_at(Vec3(0.2, 0, 0));
  big.vdw_radius = 3.0;
  small.vdw_radius = 1.0;
  const std::vector<Atom> atoms{small, big};
  Rng rng(6);
  const auto pts = sample_surface(atoms, 1.4, 100, rng);
  ASSERT_FALSE(pts.empty());
  for (const auto& p : pts) EXPECT_NEAR(p.pos.norm(), 4.4, 1e-9);
}

TEST(SurfaceSampling, InvalidArguments) {
  Rng rng(7);
  EXPECT_THROW(sample_surface(std::vector<Atom>{}, 1.4, 10, rng), Error);
  EXPECT_THROW(sample_surface(std::vector<Atom>{atom_at(Vec3::Zero())}, 0.0, 10, rng), Error);
}

TEST(SurfaceSampling, RigidMotionMovesPointsRigidly) {
  const auto atoms = peptide(8, 6);
  Rng mrng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const Rotation r = sample_uniform_rotation(mrng);
    const Vec3 v = random_vec(mrng, 10.0);
    auto moved = atoms;
    for (auto& a : moved) a.pos = r * a.pos + v;
    Rng a(100 + trial), b(100 + trial);
    const auto p0 = sample_surface(atoms, 1.4, 300, a);
    const auto p1 = sample_surface(moved, 1.4, 300, b);
    ASSERT_EQ(p0.size(), p1.size());
    for (std::size_t i = 0; i < p0.size(); ++i) {
      EXPECT_LT((p1[i].pos - (r * p0[i].pos + v)).norm(), 1e-9);
      EXPECT_LT((p1[i].normal - r * p0[i].normal).norm(), 1e-9);
    }
  }
}

TEST(SurfaceSampling, DeterministicBytes) {
  const auto atoms = peptide(10);
  Rng a(11), b(11);
  auto pa = sample_surface(atoms, 1.4, 200, a);
  auto pb = sample_surface(atoms, 1.4, 200, b);
  featurize_surface(pa, atoms);
  featurize_surface(pb, atoms);
  std::ostringstream sa, sb;
  write_points(sa, pa);
  write_points(sb, pb);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(SurfaceFeatures, HydropathyScale) {
  SurfacePoint p;
  p.pos = Vec3(0.1, 0, 0);
  EXPECT_EQ(hydropathy_feature(p, std::vector<Atom>{atom_at(Vec3::Zero(), Element::C, 1.7, 9)}), 1.0);   // Ile +4.5
  EXPECT_EQ(hydropathy_feature(p, std::vector<Atom>{atom_at(Vec3::Zero(), Element::C, 1.7, 1)}), -1.0);  // Arg -4.5
  EXPECT_EQ(normalize_hydropathy(0.0), 0.0);
  EXPECT_NEAR(hydropathy_feature(p, std::vector<Atom>{atom_at(Vec3::Zero(), Element::C, 1.7, 0)}), 0.4, 1e-15);
}

TEST(SurfaceFeatures, HydropathyUsesNearestAtom) {
  const std::vector<Atom> atoms{atom_at(Vec3::Zero(), Element::C, 1.7, 9), atom_at(Vec3(5, 0, 0), Element::C, 1.7, 1)};
  SurfacePoint p;
  p.pos = Vec3(4.0, 0, 0);
  EXPECT_EQ(hydropathy_feature(p, atoms), -1.0);
}

TEST(SurfaceFeatures, ElectrostaticsCap) {
  EXPECT_EQ(electrostatics_feature(45.0), 1.0);
  EXPECT_EQ(electrostatics_feature(-15.0), -0.5);
  EXPECT_EQ(electrostatics_feature(0.0), 0.0);
  EXPECT_EQ(electrostatics_feature(-300.0), -1.0);
}

TEST(SurfaceFeatures, FephRuleTable) {
  SurfacePoint p;
  p.pos = Vec3(0.2, 0, 0);
  EXPECT_EQ(feph_label(p, std::vector<Atom>{atom_at(Vec3::Zero(), Element::O)}), Upsilon::Acceptor);
  EXPECT_EQ(feph_label(p, std::vector<Atom>{atom_at(Vec3::Zero(), Element::C)}), Upsilon::Neutral);
  EXPECT_EQ(feph_label(p, std::vector<Atom>{atom_at(Vec3::Zero(), Element::N)}), Upsilon::Donor);
  EXPECT_EQ(feph_label(p, std::vector<Atom>{atom_at(Vec3::Zero(), Element::S)}), Upsilon::Neutral);
}

TEST(SurfaceFeatures, FeaturizedPointsInRange) {
  auto atoms = peptide(12, 6);
  Rng rng(12);
  for (auto& a : atoms) a.charge = 80.0 * (uniform01(rng) - 0.5);
  auto pts = sample_surface(atoms, 1.4, 300, rng);
  featurize_surface(pts, atoms);
  for (const auto& p : pts) {
    EXPECT_LE(std::abs(p.tau[0]), 1.0);
    EXPECT_LE(std::abs(p.tau[1]), 1.0);
    const char c = upsilon_code(p.upsilon);
    EXPECT_TRUE(c == 'D' || c == 'A' || c == 'N');
  }
}

TEST(PointFrames, PerpendicularNormal) {
  SurfacePoint p;
  p.pos = Vec3::Zero();
  p.normal = Vec3(0, 0, 1);
  const std::vector<Vec3> ca{Vec3(3, 0, 0)};
  const auto f = point_frames(std::vector<SurfacePoint>{p}, ca);
  ASSERT_EQ(f.frames.size(), 1u);
  EXPECT_EQ(f.frames[0].col(0), Vec3(0, 0, 1));
  EXPECT_EQ(f.frames[0].col(1), Vec3(1, 0, 0));
  EXPECT_EQ(f.frames[0].col(2), Vec3(0, 1, 0));
}

TEST(PointFrames, ParallelDirectionDropped) {
  SurfacePoint p;
  p.normal = Vec3(0, 0, 1);
  const auto f = point_frames(std::vector<SurfacePoint>{p}, std::vector<Vec3>{Vec3(0, 0, -2)});
  EXPECT_TRUE(f.frames.empty());
  ASSERT_EQ(f.dropped.size(), 1u);
  EXPECT_THROW(point_frames(std::vector<SurfacePoint>{p}, std::vector<Vec3>{}), Error);
}

TEST(PointFrames, ValidAndEquivariant) {
  const auto atoms = peptide(13, 6);
  Rng rng(13);
  const auto pts = sample_surface(atoms, 1.4, 200, rng);
  const auto ca = calpha_positions(atoms);
  const auto base = point_frames(pts, ca);
  for (const auto& f : base.frames) EXPECT_TRUE(f.is_valid(1e-9));
  for (int trial = 0; trial < 20; ++trial) {
    const Rotation r = sample_uniform_rotation(rng);
    const Vec3 v = random_vec(rng, 5.0);
    auto moved = pts;
    for (auto& p : moved) {
      p.pos = r * p.pos + v;
      p.normal = r * p.normal;
    }
    std::vector<Vec3> ca2;
    for (const Vec3& c : ca) ca2.push_back(r * c + v);
    const auto f2 = point_frames(moved, ca2);
    ASSERT_EQ(f2.frames.size(), base.frames.size());
    for (std::size_t i = 0; i < f2.frames.size(); ++i)
      EXPECT_LT((f2.frames[i].matrix() - r.matrix() * base.frames[i].matrix()).norm(), 1e-9);
  }
}

TEST(SurfaceIo, AtomsRoundTrip) {
  auto atoms = peptide(14, 3);
  atoms[0].charge = -12.25;
  std::ostringstream out;
  write_atoms(out, atoms);
  std::istringstream in(out.str());
  const auto back = parse_atoms(in);
  ASSERT_EQ(back.size(), atoms.size());
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    EXPECT_EQ(back[i].pos, atoms[i].pos);
    EXPECT_EQ(back[i].element, atoms[i].element);
    EXPECT_EQ(back[i].residue_type, atoms[i].residue_type);
    EXPECT_EQ(back[i].is_calpha, atoms[i].is_calpha);
    EXPECT_EQ(back[i].charge, atoms[i].charge);
  }
}

TEST(SurfaceIo, MalformedAtomLine) {
  std::istringstream in("# header\nC 0 0 0 1.7 0 0 0\n");
  try {
    parse_atoms(in, "atoms.txt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::FormatError);
    EXPECT_NE(std::string(e.what()).find("atoms.txt:2"), std::string::npos);
  }
  std::istringstream bad_elem("X 0 0 0 1.7 0 0 0 0\n");
  EXPECT_THROW(parse_atoms(bad_elem), Error);
}

TEST(SurfaceIo, PointsRoundTrip) {
  const auto atoms = peptide(15, 3);
  Rng rng(15);
  auto pts = sample_surface(atoms, 1.4, 100, rng);
  featurize_surface(pts, atoms);
  std::ostringstream out;
  write_points(out, pts);
  std::istringstream in(out.str());
  const auto back = parse_points(in);
  ASSERT_EQ(back.size(), pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_EQ(back[i].pos, pts[i].pos);
    EXPECT_EQ(back[i].normal, pts[i].normal);
    EXPECT_EQ(back[i].tau, pts[i].tau);
    EXPECT_EQ(back[i].upsilon, pts[i].upsilon);
  }
}
