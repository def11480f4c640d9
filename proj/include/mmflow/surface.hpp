#ifndef MMFLOW_SURFACE_HPP
#define MMFLOW_SURFACE_HPP

// Probe-inflated sphere-union surface sampling and per-point physicochemical
// features (hydropathy, electrostatics, hydrogen-bond donor/acceptor label).

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mmflow/geom3d.hpp"
#include "mmflow/neighbor_grid.hpp"

namespace mmflow {

enum class Element { C, N, O, S, H };

inline Element parse_element(const std::string& s) {
  if (s == "C") return Element::C;
  if (s == "N") return Element::N;
  if (s == "O") return Element::O;
  if (s == "S") return Element::S;
  if (s == "H") return Element::H;
  fail(ErrorKind::FormatError, "unknown element '" + s + "'");
}

inline char element_symbol(Element e) {
  constexpr std::array<char, 5> sym{'C', 'N', 'O', 'S', 'H'};
  return sym[static_cast<int>(e)];
}

struct Atom {
  Vec3 pos = Vec3::Zero();
  Element element = Element::C;
  double vdw_radius = 1.7;
  int residue_index = 0;
  int residue_type = 0;
  bool is_calpha = false;
  /// Raw electrostatic potential assigned to this atom's surface patch.
  double charge = 0.0;
};

enum class Upsilon { Donor, Acceptor, Neutral };

inline char upsilon_code(Upsilon u) {
  switch (u) {
    case Upsilon::Donor: return 'D';
    case Upsilon::Acceptor: return 'A';
    case Upsilon::Neutral: return 'N';
  }
  return 'N';
}

inline Upsilon parse_upsilon(const std::string& s) {
  if (s == "D") return Upsilon::Donor;
  if (s == "A") return Upsilon::Acceptor;
  if (s == "N") return Upsilon::Neutral;
  fail(ErrorKind::FormatError, "unknown upsilon label '" + s + "'");
}

inline constexpr int kNumUpsilon = 3;

struct SurfacePoint {
  Vec3 pos = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  /// (hydropathy, electrostatics), each in [-1, 1].
  Eigen::Vector2d tau = Eigen::Vector2d::Zero();
  Upsilon upsilon = Upsilon::Neutral;
};

// Residue types are indexed in the alphabetical order of their three-letter codes:
// Ala Arg Asn Asp Cys Gln Glu Gly His Ile Leu Lys Met Phe Pro Ser Thr Trp Tyr Val.
inline constexpr std::array<double, 20> kKyteDoolittle{
    1.8, -4.5, -3.5, -3.5, 2.5, -3.5, -3.5, -0.4, -3.2, 4.5,
    3.8, -3.9, 1.9,  2.8,  -1.6, -0.8, -0.7, -0.9, -1.3, 4.2};

inline constexpr std::array<char, 20> kResidueLetters{'A', 'R', 'N', 'D', 'C', 'Q', 'E', 'G', 'H', 'I',
                                                      'L', 'K', 'M', 'F', 'P', 'S', 'T', 'W', 'Y', 'V'};

inline double kyte_doolittle(int residue_type) {
  require(residue_type >= 0 && residue_type < 20, ErrorKind::InvalidArgument, "residue type out of range");
  return kKyteDoolittle[residue_type];
}

inline double normalize_hydropathy(double raw) { return std::clamp(raw / 4.5, -1.0, 1.0); }

/// Caps the raw potential at +-30 and rescales to [-1, 1].
inline double electrostatics_feature(double raw_charge) { return std::clamp(raw_charge, -30.0, 30.0) / 30.0; }

inline Upsilon feph_from_element(Element e) {
  switch (e) {
    case Element::N:
    case Element::H: return Upsilon::Donor;
    case Element::O: return Upsilon::Acceptor;
    default: return Upsilon::Neutral;
  }
}

/// Nearest-atom lookup shared by the per-point features.
class AtomIndex {
 public:
  explicit AtomIndex(std::span<const Atom> atoms) : atoms_(atoms), grid_(centers(atoms), 4.0) {
    require(!atoms.empty(), ErrorKind::EmptySet, "no atoms");
  }

  const Atom& nearest(const Vec3& p) const { return atoms_[grid_.nearest(p)]; }

 private:
  static std::vector<Vec3> centers(std::span<const Atom> atoms) {
    std::vector<Vec3> c;
    c.reserve(atoms.size());
    for (const Atom& a : atoms) c.push_back(a.pos);
    return c;
  }

  std::span<const Atom> atoms_;
  NeighborGrid grid_;
};

inline double hydropathy_feature(const SurfacePoint& point, const AtomIndex& index) {
  return normalize_hydropathy(kyte_doolittle(index.nearest(point.pos).residue_type));
}

inline double hydropathy_feature(const SurfacePoint& point, std::span<const Atom> atoms) {
  return hydropathy_feature(point, AtomIndex(atoms));
}

inline Upsilon feph_label(const SurfacePoint& point, const AtomIndex& index) {
  return feph_from_element(index.nearest(point.pos).element);
}

inline Upsilon feph_label(const SurfacePoint& point, std::span<const Atom> atoms) {
  return feph_label(point, AtomIndex(atoms));
}

/// Fills tau and upsilon from the nearest atom of every point.
inline void featurize_surface(std::vector<SurfacePoint>& points, std::span<const Atom> atoms) {
  const AtomIndex index(atoms);
  for (SurfacePoint& p : points) {
    const Atom& a = index.nearest(p.pos);
    p.tau[0] = normalize_hydropathy(kyte_doolittle(a.residue_type));
    p.tau[1] = electrostatics_feature(a.charge);
    p.upsilon = feph_from_element(a.element);
  }
}

namespace detail {

inline Vec3 fibonacci_direction(int k, int n) {
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const double z = 1.0 - (2.0 * k + 1.0) / n;
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  const double phi = golden * k;
  return Vec3(r * std::cos(phi), r * std::sin(phi), z).normalized();
}

/// Frame that moves rigidly with the atom's neighborhood: x toward the nearest
/// atom, xy-plane through the next non-collinear neighbor. Identity if none exists.
inline Mat3 atom_local_frame(std::span<const Atom> atoms, std::size_t i) {
  std::vector<std::pair<double, std::size_t>> order;
  order.reserve(atoms.size());
  for (std::size_t j = 0; j < atoms.size(); ++j)
    if (j != i) order.emplace_back((atoms[j].pos - atoms[i].pos).norm(), j);
  std::sort(order.begin(), order.end());
  Vec3 a = Vec3::Zero();
  for (const auto& [d, j] : order) {
    if (!(d > 0.0)) continue;
    const Vec3 u = (atoms[j].pos - atoms[i].pos) / d;
    if (a.isZero()) {
      a = u;
      continue;
    }
    if (std::abs(a.dot(u)) < 1.0 - 1e-6) {
      const Vec3 b = (u - u.dot(a) * a).normalized();
      Mat3 m;
      m.col(0) = a;
      m.col(1) = b;
      m.col(2) = a.cross(b);
      return m;
    }
  }
  return Mat3::Identity();
}

inline bool buried(const Vec3& p, std::size_t owner, std::span<const Atom> atoms, const NeighborGrid& grid,
                   double probe, double max_radius) {
  for (std::size_t j : grid.within(p, max_radius)) {
    if (j == owner) continue;
    if ((p - atoms[j].pos).norm() < atoms[j].vdw_radius + probe) return true;
  }
  return false;
}

}  // namespace detail

/// Oriented points on the solvent accessible surface (positions and normals only).
///
/// Each inflated sphere carries a Fibonacci lattice expressed in the atom's
/// local frame composed with one random rotation per atom, so a rigid motion of
/// the atoms with the same seed moves the points rigidly. Lattice sizes follow a
/// uniform area density chosen so that about target_count points survive burial.
inline std::vector<SurfacePoint> sample_surface(std::span<const Atom> atoms, double probe_radius, int target_count,
                                                Rng& rng) {
  require(!atoms.empty(), ErrorKind::EmptySet, "need at least one atom");
  require(probe_radius > 0.0, ErrorKind::InvalidArgument, "probe radius must be positive");
  require(target_count >= 1, ErrorKind::InvalidArgument, "target count must be positive");
  double max_radius = 0.0;
  std::vector<Vec3> centers;
  for (const Atom& a : atoms) {
    require(a.vdw_radius > 0.0, ErrorKind::InvalidArgument, "vdw radius must be positive");
    max_radius = std::max(max_radius, a.vdw_radius + probe_radius);
    centers.push_back(a.pos);
  }
  const NeighborGrid grid(centers, max_radius);

  const std::size_t n_atoms = atoms.size();
  std::vector<Mat3> frames(n_atoms);
  for (std::size_t i = 0; i < n_atoms; ++i)
    frames[i] = detail::atom_local_frame(atoms, i) * sample_uniform_rotation(rng).matrix();

  // Exposed area per sphere from a fixed probe lattice.
  constexpr int kProbeLattice = 256;
  double exposed_area = 0.0;
  std::vector<bool> any_exposed(n_atoms, false);
  for (std::size_t i = 0; i < n_atoms; ++i) {
    const double r = atoms[i].vdw_radius + probe_radius;
    int free = 0;
    for (int k = 0; k < kProbeLattice; ++k) {
      const Vec3 p = atoms[i].pos + r * (frames[i] * detail::fibonacci_direction(k, kProbeLattice));
      if (!detail::buried(p, i, atoms, grid, probe_radius, max_radius)) ++free;
    }
    any_exposed[i] = free > 0;
    exposed_area += 4.0 * std::numbers::pi * r * r * free / kProbeLattice;
  }
  if (!(exposed_area > 0.0)) fail(ErrorKind::EmptySurface, "every surface candidate is buried");
  const double density = target_count / exposed_area;

  std::vector<SurfacePoint> out;
  for (std::size_t i = 0; i < n_atoms; ++i) {
    if (!any_exposed[i]) continue;
    const double r = atoms[i].vdw_radius + probe_radius;
    const int n = std::max(1, static_cast<int>(std::lround(density * 4.0 * std::numbers::pi * r * r)));
    for (int k = 0; k < n; ++k) {
      const Vec3 dir = (frames[i] * detail::fibonacci_direction(k, n)).normalized();
      SurfacePoint sp;
      sp.pos = atoms[i].pos + r * dir;
      sp.normal = dir;
      if (!detail::buried(sp.pos, i, atoms, grid, probe_radius, max_radius)) out.push_back(sp);
    }
  }
  if (out.empty()) fail(ErrorKind::EmptySurface, "every surface candidate is buried");
  return out;
}

struct PointFrames {
  std::vector<Rotation> frames;
  /// Index into the input points for each frame.
  std::vector<std::size_t> kept;
  /// Points whose normal was parallel to the direction of their nearest C-alpha.
  std::vector<std::size_t> dropped;
};

inline PointFrames point_frames(std::span<const SurfacePoint> points, std::span<const Vec3> calpha_positions) {
  require(!calpha_positions.empty(), ErrorKind::EmptySet, "need at least one C-alpha");
  const NeighborGrid grid(calpha_positions, 4.0);
  PointFrames out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 anchor = calpha_positions[grid.nearest(points[i].pos)] - points[i].pos;
    try {
      out.frames.push_back(frame_from_normal(points[i].normal, anchor));
      out.kept.push_back(i);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateDirection) throw;
      out.dropped.push_back(i);
    }
  }
  return out;
}

inline std::vector<Vec3> calpha_positions(std::span<const Atom> atoms) {
  std::vector<Vec3> out;
  for (const Atom& a : atoms)
    if (a.is_calpha) out.push_back(a.pos);
  return out;
}

// ---------------------------------------------------------------------------
// Text formats

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> tok;
  std::istringstream is(line);
  std::string s;
  while (is >> s) tok.push_back(s);
  return tok;
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) fail(ErrorKind::FormatError, where + ": bad number '" + s + "'");
  return v;
}

inline long parse_int(const std::string& s, const std::string& where) {
  long v = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) fail(ErrorKind::FormatError, where + ": bad integer '" + s + "'");
  return v;
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline bool is_blank_or_comment(const std::string& line) {
  const auto p = line.find_first_not_of(" \t\r");
  return p == std::string::npos || line[p] == '#';
}

}  // namespace detail

/// One atom per line: element x y z vdw residue_index residue_type is_calpha charge.
inline std::vector<Atom> parse_atoms(std::istream& in, const std::string& source = "<atoms>") {
  std::vector<Atom> atoms;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::is_blank_or_comment(line)) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto tok = detail::split_ws(line);
    if (tok.size() != 9) fail(ErrorKind::FormatError, where + ": expected 9 fields, got " + std::to_string(tok.size()));
    Atom a;
    a.element = parse_element(tok[0]);
    a.pos = Vec3(detail::parse_double(tok[1], where), detail::parse_double(tok[2], where),
                 detail::parse_double(tok[3], where));
    a.vdw_radius = detail::parse_double(tok[4], where);
    if (!(a.vdw_radius > 0.0)) fail(ErrorKind::FormatError, where + ": vdw radius must be positive");
    a.residue_index = static_cast<int>(detail::parse_int(tok[5], where));
    const long type = detail::parse_int(tok[6], where);
    if (type < 0 || type >= 20) fail(ErrorKind::FormatError, where + ": residue type out of range");
    a.residue_type = static_cast<int>(type);
    const long ca = detail::parse_int(tok[7], where);
    if (ca != 0 && ca != 1) fail(ErrorKind::FormatError, where + ": is_calpha must be 0 or 1");
    a.is_calpha = ca == 1;
    a.charge = detail::parse_double(tok[8], where);
    atoms.push_back(a);
  }
  return atoms;
}

inline std::vector<Atom> read_atoms(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::FormatError, "cannot open atom file " + path);
  return parse_atoms(in, path);
}

inline void write_atoms(std::ostream& out, std::span<const Atom> atoms) {
  out << "# element x y z vdw residue_index residue_type is_calpha charge\n";
  for (const Atom& a : atoms)
    out << element_symbol(a.element) << ' ' << detail::fmt17(a.pos.x()) << ' ' << detail::fmt17(a.pos.y()) << ' '
        << detail::fmt17(a.pos.z()) << ' ' << detail::fmt17(a.vdw_radius) << ' ' << a.residue_index << ' '
        << a.residue_type << ' ' << (a.is_calpha ? 1 : 0) << ' ' << detail::fmt17(a.charge) << '\n';
}

inline void write_point(std::ostream& out, const SurfacePoint& p) {
  out << detail::fmt17(p.pos.x()) << ' ' << detail::fmt17(p.pos.y()) << ' ' << detail::fmt17(p.pos.z()) << ' '
      << detail::fmt17(p.normal.x()) << ' ' << detail::fmt17(p.normal.y()) << ' ' << detail::fmt17(p.normal.z())
      << ' ' << detail::fmt17(p.tau[0]) << ' ' << detail::fmt17(p.tau[1]) << ' ' << upsilon_code(p.upsilon) << '\n';
}

/// One point per line: x y z nx ny nz tau0 tau1 upsilon.
inline void write_points(std::ostream& out, std::span<const SurfacePoint> points) {
  for (const SurfacePoint& p : points) write_point(out, p);
}

/// Point blocks separated by blank lines (gnuplot index convention).
inline std::vector<std::vector<SurfacePoint>> parse_point_blocks(std::istream& in,
                                                                 const std::string& source = "<points>") {
  std::vector<std::vector<SurfacePoint>> blocks(1);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      if (!blocks.back().empty()) blocks.emplace_back();
      continue;
    }
    if (detail::is_blank_or_comment(line)) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto tok = detail::split_ws(line);
    if (tok.size() != 9) fail(ErrorKind::FormatError, where + ": expected 9 fields, got " + std::to_string(tok.size()));
    SurfacePoint p;
    double v[8];
    for (int k = 0; k < 8; ++k) v[k] = detail::parse_double(tok[k], where);
    p.pos = Vec3(v[0], v[1], v[2]);
    p.normal = Vec3(v[3], v[4], v[5]);
    p.tau = Eigen::Vector2d(v[6], v[7]);
    p.upsilon = parse_upsilon(tok[8]);
    blocks.back().push_back(p);
  }
  if (blocks.back().empty()) blocks.pop_back();
  return blocks;
}

inline std::vector<SurfacePoint> parse_points(std::istream& in, const std::string& source = "<points>") {
  std::vector<SurfacePoint> all;
  for (auto& b : parse_point_blocks(in, source)) all.insert(all.end(), b.begin(), b.end());
  return all;
}

}  // namespace mmflow

#endif  // MMFLOW_SURFACE_HPP
