#ifndef MMFLOW_PIPELINE_HPP
#define MMFLOW_PIPELINE_HPP

// End-to-end commands: synthesize toy data, train a flow family, sample from
// a checkpoint, evaluate samples against a reference, and sample a surface.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "mmflow/checkpoint.hpp"
#include "mmflow/config.hpp"
#include "mmflow/flows_cont.hpp"
#include "mmflow/flows_discrete.hpp"
#include "mmflow/flows_so3.hpp"
#include "mmflow/metrics.hpp"
#include "mmflow/nn_train.hpp"
#include "mmflow/optim.hpp"
#include "mmflow/surface.hpp"
#include "mmflow/toy_data.hpp"

namespace mmflow {

namespace fs = std::filesystem;

enum class FlowKind { Pos, So3, Torus, Cat, Con, Joint };

inline FlowKind parse_flow(const std::string& s) {
  if (s == "pos") return FlowKind::Pos;
  if (s == "so3") return FlowKind::So3;
  if (s == "torus") return FlowKind::Torus;
  if (s == "cat") return FlowKind::Cat;
  if (s == "con") return FlowKind::Con;
  if (s == "joint") return FlowKind::Joint;
  fail(ErrorKind::ConfigError, "unknown flow '" + s + "'");
}

/// Categorical states: 20 symbols plus the mask.
inline constexpr int kCatStates = kNumResidueTypes + 1;

// ---------------------------------------------------------------------------
// File helpers

/// Writes through a temporary file and renames it into place.
inline void write_atomic(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot write " + tmp.string());
    body(out);
    out.flush();
    if (!out) fail(ErrorKind::IoError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::IoError, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void echo_config(const RunConfig& cfg, const fs::path& dir) {
  write_atomic(dir / "config.txt", [&](std::ostream& o) { cfg.write(o); });
}

inline std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::FormatError, "cannot open " + path.string());
  return in;
}

/// Numeric rows; blank lines separate blocks; '#' lines are comments.
inline std::vector<std::vector<std::vector<double>>> read_blocks(const fs::path& path, bool uniform_columns = true) {
  std::ifstream in = open_input(path);
  std::vector<std::vector<std::vector<double>>> blocks(1);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      if (!blocks.back().empty()) blocks.emplace_back();
      continue;
    }
    if (detail::is_blank_or_comment(line)) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    std::vector<double> row;
    for (const auto& tok : detail::split_ws(line)) row.push_back(detail::parse_double(tok, where));
    if (uniform_columns && !blocks.back().empty() && blocks.back().front().size() != row.size())
      fail(ErrorKind::FormatError, where + ": inconsistent column count");
    blocks.back().push_back(std::move(row));
  }
  if (blocks.back().empty()) blocks.pop_back();
  return blocks;
}

inline std::vector<std::vector<double>> read_table(const fs::path& path, std::size_t min_cols, std::size_t max_cols) {
  std::vector<std::vector<double>> rows;
  for (auto& b : read_blocks(path))
    for (auto& r : b) rows.push_back(std::move(r));
  if (rows.empty()) fail(ErrorKind::FormatError, path.string() + ": no data rows");
  if (rows.front().size() < min_cols || rows.front().size() > max_cols)
    fail(ErrorKind::FormatError, path.string() + ": unexpected column count " + std::to_string(rows.front().size()));
  return rows;
}

inline void write_row(std::ostream& o, const double* v, Eigen::Index n) {
  for (Eigen::Index i = 0; i < n; ++i) o << (i ? " " : "") << detail::fmt17(v[i]);
  o << '\n';
}

// ---------------------------------------------------------------------------
// Datasets

struct ResidueSet {
  Eigen::MatrixXd pos;  // 3 x n, centered per peptide
  std::vector<Rotation> ori;
  Eigen::MatrixXd tor;  // D x n
  std::vector<int> type;

  std::size_t size() const { return type.size(); }
};

struct Dataset {
  Eigen::MatrixXd pos;        // 2 x n
  std::vector<int> pos_cond;  // condition slot per position sample
  std::vector<Rotation> ori;
  std::vector<int> cat;
  Eigen::MatrixXd con;  // 2 x n surface features
  ResidueSet str;
};

/// Backbone frame with the first axis along CA->C and the second in the N-CA-C plane.
inline Rotation backbone_frame(const Vec3& n, const Vec3& ca, const Vec3& c) {
  const Vec3 e1 = (c - ca).normalized();
  const Vec3 u = n - ca;
  const Vec3 e2 = (u - e1.dot(u) * e1).normalized();
  Mat3 m;
  m << e1, e2, e1.cross(e2);
  return project_to_so3(m);
}

struct SynthOutput {
  Dataset data;
  ConditionalToy clusters;
  Eigen::MatrixXd eight;
  std::vector<Atom> first_peptide;
};

inline SynthOutput synthesize(const RunConfig& cfg) {
  Rng rng = make_stream(cfg.seed(), "synth");
  const int n = static_cast<int>(cfg.integer("n_data"));
  SynthOutput s;
  s.eight = sample_eight_gaussians(n, rng, cfg.num("radius"), cfg.num("stddev"));
  s.clusters = sample_conditional_clusters(n, rng);
  s.data.ori = sample_so3_targets(n, so3_mode_centers(static_cast<int>(cfg.integer("so3_modes")), cfg.seed()), rng);
  s.data.cat = sample_categorical(n, toy_multinomial(), rng);

  const int peptides = static_cast<int>(cfg.integer("peptides"));
  const int residues = static_cast<int>(cfg.integer("residues"));
  const int dims = static_cast<int>(cfg.integer("torsion_dims"));
  std::vector<Eigen::Vector2d> con;
  ResidueSet& str = s.data.str;
  str.pos.resize(3, peptides * residues);
  str.tor = sample_torsions(peptides * residues, dims, rng);
  for (int p = 0; p < peptides; ++p) {
    std::vector<Atom> atoms = synthetic_peptide_atoms(residues, rng);
    Vec3 centroid = Vec3::Zero();
    for (int r = 0; r < residues; ++r) centroid += atoms[4 * r + 1].pos;
    centroid /= residues;
    for (int r = 0; r < residues; ++r) {
      const int col = p * residues + r;
      str.pos.col(col) = atoms[4 * r + 1].pos - centroid;
      str.ori.push_back(backbone_frame(atoms[4 * r].pos, atoms[4 * r + 1].pos, atoms[4 * r + 2].pos));
      str.type.push_back(atoms[4 * r].residue_type);
    }
    auto pts = sample_surface(atoms, cfg.num("probe"), static_cast<int>(cfg.integer("surface_points")), rng);
    featurize_surface(pts, atoms);
    for (const auto& q : pts) con.push_back(q.tau);
    if (p == 0) s.first_peptide = std::move(atoms);
  }
  s.data.con.resize(2, static_cast<Eigen::Index>(con.size()));
  for (std::size_t i = 0; i < con.size(); ++i) s.data.con.col(static_cast<Eigen::Index>(i)) = con[i];
  s.data.pos = s.eight;
  s.data.pos_cond.assign(static_cast<std::size_t>(n), kNullCondition);
  return s;
}

inline int cluster_condition(int label) {
  return (label == 0 ? ConditionLabel::cyclic() : ConditionLabel::disulfide()).index();
}

inline void write_dataset(const SynthOutput& s, const fs::path& dir) {
  write_atomic(dir / "pos.dat", [&](std::ostream& o) {
    for (Eigen::Index j = 0; j < s.eight.cols(); ++j) write_row(o, s.eight.col(j).data(), 2);
  });
  write_atomic(dir / "clusters.dat", [&](std::ostream& o) {
    for (Eigen::Index j = 0; j < s.clusters.points.cols(); ++j)
      o << detail::fmt17(s.clusters.points(0, j)) << ' ' << detail::fmt17(s.clusters.points(1, j)) << ' '
        << s.clusters.label[j] << '\n';
  });
  write_atomic(dir / "so3.dat", [&](std::ostream& o) {
    double buf[9];
    for (const Rotation& r : s.data.ori) {
      rotation_features(r, buf);
      write_row(o, buf, 9);
    }
  });
  write_atomic(dir / "cat.dat", [&](std::ostream& o) {
    for (int v : s.data.cat) o << v << '\n';
  });
  write_atomic(dir / "con.dat", [&](std::ostream& o) {
    for (Eigen::Index j = 0; j < s.data.con.cols(); ++j) write_row(o, s.data.con.col(j).data(), 2);
  });
  write_atomic(dir / "residues.dat", [&](std::ostream& o) {
    const ResidueSet& r = s.data.str;
    o << "# ca_x ca_y ca_z r00..r22 torsions type\n";
    double buf[9];
    for (std::size_t i = 0; i < r.size(); ++i) {
      const Eigen::Index c = static_cast<Eigen::Index>(i);
      write_row(o, r.pos.col(c).data(), 3);
      rotation_features(r.ori[i], buf);
      write_row(o, buf, 9);
      write_row(o, r.tor.col(c).data(), r.tor.rows());
      o << r.type[i] << "\n\n";
    }
  });
  write_atomic(dir / "atoms.dat", [&](std::ostream& o) { write_atoms(o, s.first_peptide); });
}

inline Rotation rotation_from_row(const std::vector<double>& v, std::size_t offset, const std::string& where) {
  Mat3 m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = v[offset + 3 * i + j];
  if (!Rotation::unchecked(m).is_valid(1e-6)) fail(ErrorKind::FormatError, where + ": row is not a rotation");
  return project_to_so3(m);
}

/// Loads what `kind` needs from a directory written by write_dataset.
inline Dataset read_dataset(const fs::path& dir, FlowKind kind, const RunConfig& cfg) {
  Dataset d;
  const bool all = kind == FlowKind::Joint;
  if (kind == FlowKind::Pos || all) {
    if (cfg.str("pos_data") == "clusters") {
      const auto rows = read_table(dir / "clusters.dat", 3, 3);
      d.pos.resize(2, static_cast<Eigen::Index>(rows.size()));
      for (std::size_t j = 0; j < rows.size(); ++j) {
        d.pos.col(static_cast<Eigen::Index>(j)) << rows[j][0], rows[j][1];
        d.pos_cond.push_back(cluster_condition(static_cast<int>(rows[j][2])));
      }
    } else {
      const auto rows = read_table(dir / "pos.dat", 2, 2);
      d.pos.resize(2, static_cast<Eigen::Index>(rows.size()));
      for (std::size_t j = 0; j < rows.size(); ++j) d.pos.col(static_cast<Eigen::Index>(j)) << rows[j][0], rows[j][1];
      d.pos_cond.assign(rows.size(), kNullCondition);
    }
  }
  if (kind == FlowKind::So3 || all)
    for (const auto& r : read_table(dir / "so3.dat", 9, 9)) d.ori.push_back(rotation_from_row(r, 0, (dir / "so3.dat").string()));
  if (kind == FlowKind::Cat || all)
    for (const auto& r : read_table(dir / "cat.dat", 1, 1)) {
      const int v = static_cast<int>(r[0]);
      if (v < 0 || v >= kNumResidueTypes || v != r[0]) fail(ErrorKind::FormatError, "cat.dat: symbol out of range");
      d.cat.push_back(v);
    }
  if (kind == FlowKind::Con || all) {
    const auto rows = read_table(dir / "con.dat", 2, 2);
    d.con.resize(2, static_cast<Eigen::Index>(rows.size()));
    for (std::size_t j = 0; j < rows.size(); ++j) d.con.col(static_cast<Eigen::Index>(j)) << rows[j][0], rows[j][1];
  }
  if (kind == FlowKind::Torus || all) {
    const fs::path path = dir / "residues.dat";
    const auto blocks = read_blocks(path, false);
    const Eigen::Index dims = cfg.integer("torsion_dims");
    ResidueSet& s = d.str;
    s.pos.resize(3, static_cast<Eigen::Index>(blocks.size()));
    s.tor.resize(dims, static_cast<Eigen::Index>(blocks.size()));
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      if (b.size() != 4 || b[0].size() != 3 || b[1].size() != 9 || static_cast<Eigen::Index>(b[2].size()) != dims ||
          b[3].size() != 1)
        fail(ErrorKind::FormatError, path.string() + ": malformed residue block " + std::to_string(i));
      const Eigen::Index c = static_cast<Eigen::Index>(i);
      s.pos.col(c) << b[0][0], b[0][1], b[0][2];
      s.ori.push_back(rotation_from_row(b[1], 0, path.string()));
      for (Eigen::Index k = 0; k < dims; ++k) s.tor(k, c) = TorusAngle(b[2][k]).value();
      s.type.push_back(static_cast<int>(b[3][0]));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Models

struct ModelShape {
  std::vector<int> hidden;
  Activation act = Activation::SiLU;
  int cond_dim = 8;
  int torsion_dims = 4;

  static ModelShape from_config(const RunConfig& cfg) {
    ModelShape s;
    s.hidden.assign(static_cast<std::size_t>(cfg.integer("depth")), static_cast<int>(cfg.integer("hidden")));
    s.act = cfg.str("activation") == "relu" ? Activation::ReLU : Activation::SiLU;
    s.cond_dim = static_cast<int>(cfg.integer("cond_dim"));
    s.torsion_dims = static_cast<int>(cfg.integer("torsion_dims"));
    return s;
  }
};

inline FlowModels make_models(FlowKind kind, const ModelShape& s, Rng& rng) {
  FlowModels m;
  auto make = [&](int in, int out) { return VectorFieldModel::init(in, out, s.hidden, s.act, s.cond_dim, rng); };
  const bool all = kind == FlowKind::Joint;
  if (kind == FlowKind::Pos || all) m.pos = make(2, 2);
  if (kind == FlowKind::So3 || all) m.ori = make(9, 3);
  if (kind == FlowKind::Cat || all) m.cat = make(kCatStates, kCatStates - 1);
  if (kind == FlowKind::Con || all) m.con = make(2, 2);
  if (kind == FlowKind::Torus || all) m.str_tor = make(2 * s.torsion_dims, s.torsion_dims);
  if (all) {
    m.str_pos = make(3, 3);
    m.str_ori = make(9, 3);
    m.str_type = make(kNumResidueTypes, kNumResidueTypes);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

inline EuclideanBatch euclidean_batch(const Eigen::MatrixXd& data, const std::vector<int>* cond, int b, Rng& rng) {
  std::uniform_int_distribution<Eigen::Index> pick(0, data.cols() - 1);
  EuclideanBatch out{Eigen::MatrixXd(data.rows(), b), Eigen::MatrixXd(data.rows(), b), {}, {}};
  for (int j = 0; j < b; ++j) {
    const Eigen::Index k = pick(rng);
    out.x1.col(j) = data.col(k);
    for (Eigen::Index i = 0; i < data.rows(); ++i) out.x0(i, j) = standard_normal(rng);
    out.t.push_back(sample_train_time(rng));
    out.cond.push_back(cond ? (*cond)[static_cast<std::size_t>(k)] : kNullCondition);
  }
  return out;
}

inline So3Batch so3_batch(const std::vector<Rotation>& data, int b, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  So3Batch out;
  for (int j = 0; j < b; ++j) {
    const Rotation& r1 = data[pick(rng)];
    const double t = sample_train_time(rng);
    for (;;) {
      try {
        out.samples.push_back(so3_path(sample_uniform_rotation(rng), r1, t));
        break;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::AngleNearPi) throw;
      }
    }
    out.cond.push_back(kNullCondition);
  }
  return out;
}

inline CategoricalBatch categorical_batch(const std::vector<int>& data, int b, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const ConditionalPath path{PathKind::Mask, kCatStates};
  CategoricalBatch out;
  out.num_states = kCatStates;
  for (int j = 0; j < b; ++j) {
    const int x1 = data[pick(rng)];
    const double t = sample_train_time(rng);
    out.x1.push_back(x1);
    out.t.push_back(t);
    out.xt.push_back(sample_path_state(path, x1, t, rng));
    out.cond.push_back(kNullCondition);
  }
  return out;
}

inline TorusBatch torus_batch(const Eigen::MatrixXd& data, int b, Rng& rng) {
  std::uniform_int_distribution<Eigen::Index> pick(0, data.cols() - 1);
  TorusBatch out{Eigen::MatrixXd(data.rows(), b), Eigen::MatrixXd(data.rows(), b), {}, {}};
  for (int j = 0; j < b; ++j) {
    out.c1.col(j) = data.col(pick(rng));
    for (Eigen::Index i = 0; i < data.rows(); ++i) out.c0(i, j) = 2.0 * std::numbers::pi * uniform01(rng);
    out.t.push_back(sample_train_time(rng));
    out.cond.push_back(kNullCondition);
  }
  return out;
}

inline Eigen::MatrixXd one_hot_types(const std::vector<int>& types) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(kNumResidueTypes, static_cast<Eigen::Index>(types.size()));
  for (std::size_t j = 0; j < types.size(); ++j) m(types[j], static_cast<Eigen::Index>(j)) = 1.0;
  return m;
}

}  // namespace detail

inline JointBatch draw_batch(const Dataset& d, FlowKind kind, int b, Rng& rng) {
  JointBatch out;
  const bool all = kind == FlowKind::Joint;
  if (kind == FlowKind::Pos || all) out.pos = detail::euclidean_batch(d.pos, &d.pos_cond, b, rng);
  if (kind == FlowKind::So3 || all) out.ori = detail::so3_batch(d.ori, b, rng);
  if (kind == FlowKind::Cat || all) out.cat = detail::categorical_batch(d.cat, b, rng);
  if (kind == FlowKind::Con || all) out.con = detail::euclidean_batch(d.con, nullptr, b, rng);
  if (kind == FlowKind::Torus || all) out.str.tor = detail::torus_batch(d.str.tor, b, rng);
  if (all) {
    out.str.pos = detail::euclidean_batch(d.str.pos, nullptr, b, rng);
    out.str.ori = detail::so3_batch(d.str.ori, b, rng);
    out.str.type = detail::euclidean_batch(detail::one_hot_types(d.str.type), nullptr, b, rng);
  }
  return out;
}

struct TrainOptions {
  long iterations = 2000;
  int batch = 256;
  long log_every = 100;
  AdamConfig adam;
  double plateau_factor = 0.8;
  int plateau_patience = 10;
  double min_lr = 5e-6;
  LossWeights weights;
  double p_uncond = 0.1;
  NormConvention con_norm = NormConvention::Squared;

  static TrainOptions from_config(const RunConfig& cfg) {
    TrainOptions o;
    o.iterations = cfg.integer("iterations");
    o.batch = static_cast<int>(cfg.integer("batch"));
    o.log_every = cfg.integer("log_every");
    o.adam.lr = cfg.num("lr");
    o.adam.clip_norm = cfg.num("clip");
    o.plateau_factor = cfg.num("plateau_factor");
    o.plateau_patience = static_cast<int>(cfg.integer("plateau_patience"));
    o.min_lr = cfg.num("min_lr");
    o.weights = {cfg.num("lambda_pos"), cfg.num("lambda_ori"), cfg.num("lambda_cat"), cfg.num("lambda_con"),
                 cfg.num("lambda_str")};
    o.p_uncond = cfg.num("p_uncond");
    o.con_norm = cfg.str("con_norm") == "unsquared" ? NormConvention::Unsquared : NormConvention::Squared;
    return o;
  }
};

struct LossLogRow {
  long iteration = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

inline void write_loss_header(std::ostream& o) { o << "iteration,loss_pos,loss_ori,loss_cat,loss_con,loss_str,total,lr\n"; }

inline void write_loss_row(std::ostream& o, const LossLogRow& r) {
  o << r.iteration << ',' << detail::fmt17(r.loss.pos) << ',' << detail::fmt17(r.loss.ori) << ','
    << detail::fmt17(r.loss.cat) << ',' << detail::fmt17(r.loss.con) << ',' << detail::fmt17(r.loss.str) << ','
    << detail::fmt17(r.loss.total) << ',' << detail::fmt17(r.lr) << '\n';
}

/// Runs the optimizer; one log row (window means) per `log_every` iterations,
/// each of which is also a plateau-scheduler evaluation.
inline std::vector<LossLogRow> train_models(FlowModels& models, const Dataset& data, FlowKind kind,
                                            const TrainOptions& o, Rng& rng) {
  FlowGrads grads = FlowGrads::zeros_like(models);
  AdamState opt;
  AdamConfig adam = o.adam;
  PlateauScheduler sched(adam.lr, o.plateau_factor, o.plateau_patience, o.min_lr);
  std::vector<LossLogRow> rows;
  LossBreakdown window;
  for (long it = 0; it < o.iterations; ++it) {
    const JointBatch batch = draw_batch(data, kind, o.batch, rng);
    const CfgStepResult r = cfg_train_step(batch, o.weights, models, grads, opt, adam, o.p_uncond, rng, o.con_norm);
    if (!std::isfinite(r.loss.total) || !std::isfinite(r.grad_norm))
      fail(ErrorKind::NumericFailure, "non-finite loss at iteration " + std::to_string(it));
    window.pos += r.loss.pos;
    window.ori += r.loss.ori;
    window.cat += r.loss.cat;
    window.con += r.loss.con;
    window.str += r.loss.str;
    window.total += r.loss.total;
    if ((it + 1) % o.log_every == 0) {
      const double n = static_cast<double>(o.log_every);
      LossBreakdown mean{window.pos / n, window.ori / n, window.cat / n, window.con / n, window.str / n, window.total / n};
      rows.push_back({it + 1, mean, adam.lr});
      adam.lr = sched.observe(mean.total);
      window = {};
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sampling

/// Step indices (0..N) at which to record the state.
inline std::vector<int> parse_trajectory(const std::string& spec, int steps) {
  std::vector<int> frames;
  if (spec.empty()) return frames;
  if (spec == "all") {
    for (int k = 0; k <= steps; ++k) frames.push_back(k);
    return frames;
  }
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    double t = 0.0;
    const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), t);
    if (ec != std::errc() || p != tok.data() + tok.size() || !(t >= 0.0 && t <= 1.0))
      fail(ErrorKind::ConfigError, "trajectory times must lie in [0, 1]: '" + tok + "'");
    frames.push_back(static_cast<int>(std::lround(t * steps)));
  }
  std::sort(frames.begin(), frames.end());
  frames.erase(std::unique(frames.begin(), frames.end()), frames.end());
  return frames;
}

struct Trajectory {
  std::vector<int> frames;           // requested step indices
  std::vector<double> times;         // recorded times
  std::vector<Eigen::MatrixXd> states;

  void maybe_record(int k, int steps, const Eigen::MatrixXd& s) {
    if (std::binary_search(frames.begin(), frames.end(), k)) {
      times.push_back(static_cast<double>(k) / steps);
      states.push_back(s);
    }
  }
};

struct Guidance {
  int cond = kNullCondition;
  double weight = 0.0;
};

inline Eigen::MatrixXd guided_field(const VectorFieldModel& m, const Eigen::MatrixXd& x, double t, const Guidance& g) {
  const std::vector<double> ts(static_cast<std::size_t>(x.cols()), t);
  const std::vector<int> null(static_cast<std::size_t>(x.cols()), kNullCondition);
  const Eigen::MatrixXd v_null = m.forward(x, ts, null);
  if (g.cond == kNullCondition) return v_null;
  const std::vector<int> c(static_cast<std::size_t>(x.cols()), g.cond);
  return cfg_sample_field(m.forward(x, ts, c), v_null, g.weight);
}

/// Euler integration of a Euclidean field for a batch of starting points.
inline Eigen::MatrixXd sample_euclidean(const VectorFieldModel& m, Eigen::MatrixXd x, int steps, const Guidance& g,
                                        Trajectory* traj = nullptr) {
  require(steps >= 1, ErrorKind::InvalidArgument, "need at least one step");
  const double h = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    if (traj) traj->maybe_record(k, steps, x);
    x += h * guided_field(m, x, k * h, g);
  }
  if (traj) traj->maybe_record(steps, steps, x);
  if (!x.allFinite()) fail(ErrorKind::NumericFailure, "sampling produced non-finite values");
  return x;
}

inline Eigen::MatrixXd rotations_to_matrix(const std::vector<Rotation>& rs) {
  Eigen::MatrixXd m(9, static_cast<Eigen::Index>(rs.size()));
  for (std::size_t j = 0; j < rs.size(); ++j) rotation_features(rs[j], m.col(static_cast<Eigen::Index>(j)).data());
  return m;
}

inline std::vector<Rotation> sample_so3(const VectorFieldModel& m, const std::vector<Rotation>& start, int steps,
                                        const Guidance& g, Trajectory* traj = nullptr) {
  require(steps >= 1, ErrorKind::InvalidArgument, "need at least one step");
  std::vector<So3Integrator> its;
  for (const Rotation& r : start) its.emplace_back(r);
  std::vector<Rotation> cur = start;
  const double h = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    const Eigen::MatrixXd feats = rotations_to_matrix(cur);
    if (traj) traj->maybe_record(k, steps, feats);
    const Eigen::MatrixXd v = guided_field(m, feats, k * h, g);
    for (std::size_t j = 0; j < its.size(); ++j) cur[j] = its[j].step(v.col(static_cast<Eigen::Index>(j)), h);
  }
  if (traj) traj->maybe_record(steps, steps, rotations_to_matrix(cur));
  return cur;
}

inline Eigen::MatrixXd sample_torus(const VectorFieldModel& m, Eigen::MatrixXd c, int steps, const Guidance& g,
                                    Trajectory* traj = nullptr) {
  require(steps >= 1, ErrorKind::InvalidArgument, "need at least one step");
  const double h = 1.0 / steps;
  auto features = [&](const Eigen::MatrixXd& a) {
    Eigen::MatrixXd f(2 * a.rows(), a.cols());
    for (Eigen::Index j = 0; j < a.cols(); ++j) f.col(j) = torus_features(a.col(j));
    return f;
  };
  for (int k = 0; k < steps; ++k) {
    if (traj) traj->maybe_record(k, steps, c);
    c += h * guided_field(m, features(c), k * h, g);
    c = c.unaryExpr([](double a) { return TorusAngle::wrap(a); });
  }
  if (traj) traj->maybe_record(steps, steps, c);
  if (!c.allFinite()) fail(ErrorKind::NumericFailure, "sampling produced non-finite values");
  return c;
}

/// Mask-path denoising. While a variable is masked its input is identical for
/// every sample, so the posterior at each step is computed once and shared.
inline std::vector<int> sample_categorical(const VectorFieldModel& m, int n, int steps, const Guidance& g, Rng& rng,
                                           RateNormalization norm = RateNormalization::SupportCount,
                                           Trajectory* traj = nullptr, CtmcStats* stats = nullptr) {
  require(steps >= 1, ErrorKind::InvalidArgument, "need at least one step");
  const int mask = kCatStates - 1;
  const double h = 1.0 / steps;
  std::vector<std::vector<double>> table(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    const Eigen::MatrixXd logits = guided_field(m, Eigen::MatrixXd(one_hot(mask, kCatStates)), k * h, g);
    const double mx = logits.maxCoeff();
    std::vector<double> p(static_cast<std::size_t>(logits.rows()));
    double z = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) z += (p[i] = std::exp(logits(i, 0) - mx));
    for (double& v : p) v /= z;
    table[k] = std::move(p);
  }
  // Every variable that is still masked sees the same expected rate row.
  const ConditionalPath path{PathKind::Mask, kCatStates};
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) rows[k] = expected_rate_row(path, mask, k * h, table[k], norm);
  const auto& last = table.back();
  const int fallback = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
  auto unmask = [&](int& xi) {
    if (xi != mask) return;
    if (stats) ++stats->forced_unmasks;
    xi = fallback;
  };
  std::vector<int> x(static_cast<std::size_t>(n), mask);
  if (!traj || traj->frames.empty()) {
    for (int& xi : x) {
      for (int k = 0; k < steps && xi == mask; ++k) xi = ctmc_euler_step(xi, rows[k], h, rng, stats);
      unmask(xi);
    }
    return x;
  }
  // Step-major so intermediate (possibly masked) states can be recorded.
  auto as_matrix = [&](const std::vector<int>& v) {
    Eigen::MatrixXd f(1, static_cast<Eigen::Index>(v.size()));
    for (std::size_t j = 0; j < v.size(); ++j) f(0, static_cast<Eigen::Index>(j)) = v[j];
    return f;
  };
  for (int k = 0; k < steps; ++k) {
    traj->maybe_record(k, steps, as_matrix(x));
    for (int& xi : x)
      if (xi == mask) xi = ctmc_euler_step(xi, rows[k], h, rng, stats);
  }
  for (int& xi : x) unmask(xi);
  traj->maybe_record(steps, steps, as_matrix(x));
  return x;
}

// ---------------------------------------------------------------------------
// Commands

inline fs::path data_dir(const RunConfig& cfg) { return cfg.str("data").empty() ? fs::path(cfg.str("out")) : fs::path(cfg.str("data")); }

inline fs::path checkpoint_path(const RunConfig& cfg) {
  return cfg.str("checkpoint").empty() ? fs::path(cfg.str("out")) / "checkpoint.mflw" : fs::path(cfg.str("checkpoint"));
}

inline Guidance guidance_from(const RunConfig& cfg) {
  return {ConditionLabel::parse(cfg.str("condition")).index(), cfg.num("guidance")};
}

inline void cmd_synth(const RunConfig& cfg) {
  cfg.validate();
  const fs::path out(cfg.str("out"));
  write_dataset(synthesize(cfg), out);
  echo_config(cfg, out);
}

inline void cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const FlowKind kind = parse_flow(cfg.str("flow"));
  const Dataset data = read_dataset(data_dir(cfg), kind, cfg);
  Rng init = make_stream(cfg.seed(), "init");
  FlowModels models = make_models(kind, ModelShape::from_config(cfg), init);
  Rng rng = make_stream(cfg.seed(), "train");
  const auto rows = train_models(models, data, kind, TrainOptions::from_config(cfg), rng);
  const fs::path out(cfg.str("out"));
  write_atomic(out / "loss.csv", [&](std::ostream& o) {
    write_loss_header(o);
    for (const auto& r : rows) write_loss_row(o, r);
  });
  write_atomic(checkpoint_path(cfg), [&](std::ostream& o) { write_checkpoint(o, models.params()); });
  echo_config(cfg, out);
}

inline FlowModels load_models(const RunConfig& cfg, FlowKind kind) {
  Rng init = make_stream(cfg.seed(), "init");
  FlowModels models = make_models(kind, ModelShape::from_config(cfg), init);
  const fs::path path = checkpoint_path(cfg);
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::CheckpointMismatch, "cannot open checkpoint " + path.string());
  load_checkpoint(read_checkpoint(in, path.string()), models.params());
  return models;
}

namespace detail {

inline void write_columns(std::ostream& o, const Eigen::MatrixXd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) write_row(o, m.col(j).data(), m.rows());
}

inline void write_trajectory(const fs::path& path, const Trajectory& tr) {
  write_atomic(path, [&](std::ostream& o) {
    for (std::size_t f = 0; f < tr.states.size(); ++f) {
      if (f) o << "\n\n";
      o << "# t=" << fmt17(tr.times[f]) << '\n';
      write_columns(o, tr.states[f]);
    }
  });
}

inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = standard_normal(rng);
  return m;
}

}  // namespace detail

inline void cmd_sample(const RunConfig& cfg) {
  cfg.validate();
  const FlowKind kind = parse_flow(cfg.str("flow"));
  FlowModels models = load_models(cfg, kind);
  const fs::path out(cfg.str("out"));
  const int n = static_cast<int>(cfg.integer("num_samples"));
  const int steps = static_cast<int>(cfg.integer("steps"));
  const Guidance g = guidance_from(cfg);
  const std::vector<int> frames = parse_trajectory(cfg.str("trajectory"), steps);
  const RateNormalization norm =
      cfg.str("rate_norm") == "literal" ? RateNormalization::LiteralS : RateNormalization::SupportCount;
  Rng rng = make_stream(cfg.seed(), "sample");
  const bool all = kind == FlowKind::Joint;
  auto name = [&](const char* part) { return all ? std::string("_") + part : std::string(); };
  auto finish = [&](const char* part, const Trajectory& tr, const std::function<void(std::ostream&)>& body) {
    write_atomic(out / ("samples" + name(part) + ".dat"), body);
    if (!frames.empty()) detail::write_trajectory(out / ("trajectory" + name(part) + ".dat"), tr);
  };

  if (models.pos) {
    Trajectory tr{frames, {}, {}};
    const Eigen::MatrixXd x = sample_euclidean(*models.pos, detail::gaussian_matrix(2, n, rng), steps, g, &tr);
    finish("pos", tr, [&](std::ostream& o) { detail::write_columns(o, x); });
  }
  if (models.ori) {
    Trajectory tr{frames, {}, {}};
    std::vector<Rotation> start;
    for (int j = 0; j < n; ++j) start.push_back(sample_uniform_rotation(rng));
    const auto rs = sample_so3(*models.ori, start, steps, g, &tr);
    finish("so3", tr, [&](std::ostream& o) { detail::write_columns(o, rotations_to_matrix(rs)); });
  }
  if (models.cat) {
    Trajectory tr{frames, {}, {}};
    const auto xs = sample_categorical(*models.cat, n, steps, g, rng, norm, &tr);
    finish("cat", tr, [&](std::ostream& o) {
      for (int v : xs) o << v << '\n';
    });
  }
  if (models.con) {
    Trajectory tr{frames, {}, {}};
    const Eigen::MatrixXd x = sample_euclidean(*models.con, detail::gaussian_matrix(2, n, rng), steps, g, &tr);
    finish("con", tr, [&](std::ostream& o) { detail::write_columns(o, x); });
  }
  if (models.str_tor && !all) {
    Trajectory tr{frames, {}, {}};
    const Eigen::Index d = models.str_tor->out_dim();
    Eigen::MatrixXd c0(d, n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < d; ++i) c0(i, j) = 2.0 * std::numbers::pi * uniform01(rng);
    const Eigen::MatrixXd c = sample_torus(*models.str_tor, c0, steps, g, &tr);
    finish("torus", tr, [&](std::ostream& o) { detail::write_columns(o, c); });
  }
  if (all) {
    Trajectory tr{frames, {}, {}};
    const Eigen::MatrixXd pos = sample_euclidean(*models.str_pos, detail::gaussian_matrix(3, n, rng), steps, g, &tr);
    std::vector<Rotation> start;
    for (int j = 0; j < n; ++j) start.push_back(sample_uniform_rotation(rng));
    const auto ori = sample_so3(*models.str_ori, start, steps, g);
    const Eigen::Index d = models.str_tor->out_dim();
    Eigen::MatrixXd c0(d, n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < d; ++i) c0(i, j) = 2.0 * std::numbers::pi * uniform01(rng);
    const Eigen::MatrixXd tor = sample_torus(*models.str_tor, c0, steps, g);
    const Eigen::MatrixXd soft =
        sample_euclidean(*models.str_type, detail::gaussian_matrix(kNumResidueTypes, n, rng), steps, g);
    finish("str", tr, [&](std::ostream& o) {
      double buf[9];
      for (Eigen::Index j = 0; j < n; ++j) {
        write_row(o, pos.col(j).data(), 3);
        rotation_features(ori[static_cast<std::size_t>(j)], buf);
        write_row(o, buf, 9);
        write_row(o, tor.col(j).data(), d);
        o << SoftType{soft.col(j)}.decode() << "\n\n";
      }
    });
  }
  echo_config(cfg, out);
}

// ---------------------------------------------------------------------------
// Evaluation

struct PointBlock {
  std::vector<Vec3> pos;
  std::vector<SurfacePoint> surf;  // filled when normals are present
  bool has_normals = false;
};

/// Accepts rows of 2 (z = 0), 3, 6 (with normals) or 9 (surface point) columns.
inline std::vector<PointBlock> read_point_file(const fs::path& path) {
  std::ifstream in = open_input(path);
  std::vector<PointBlock> out(1);
  std::string line;
  int lineno = 0;
  std::size_t cols = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      if (!out.back().pos.empty()) out.emplace_back();
      continue;
    }
    if (detail::is_blank_or_comment(line)) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto tok = detail::split_ws(line);
    if (cols == 0) cols = tok.size();
    if (tok.size() != cols || (cols != 2 && cols != 3 && cols != 6 && cols != 9))
      fail(ErrorKind::FormatError, where + ": expected 2, 3, 6 or 9 columns consistently");
    double v[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    for (std::size_t k = 0; k < std::min<std::size_t>(cols, 8); ++k) v[k] = detail::parse_double(tok[k], where);
    PointBlock& b = out.back();
    b.pos.emplace_back(v[0], v[1], cols == 2 ? 0.0 : v[2]);
    if (cols >= 6) {
      SurfacePoint p;
      p.pos = b.pos.back();
      p.normal = Vec3(v[3], v[4], v[5]);
      if (cols == 9) {
        p.tau = Eigen::Vector2d(v[6], v[7]);
        p.upsilon = parse_upsilon(tok[8]);
      }
      b.surf.push_back(p);
      b.has_normals = true;
    }
  }
  if (out.back().pos.empty()) out.pop_back();
  if (out.empty()) fail(ErrorKind::FormatError, path.string() + ": no points");
  return out;
}

inline std::vector<std::vector<int>> read_type_file(const fs::path& path) {
  std::vector<std::vector<int>> out;
  for (const auto& b : read_blocks(path)) {
    std::vector<int> seq;
    for (const auto& r : b) {
      if (r.size() != 1 || r[0] != std::floor(r[0])) fail(ErrorKind::FormatError, path.string() + ": expected one integer per line");
      seq.push_back(static_cast<int>(r[0]));
    }
    out.push_back(std::move(seq));
  }
  if (out.empty()) fail(ErrorKind::FormatError, path.string() + ": no types");
  return out;
}

inline constexpr double kUnavailable = std::numeric_limits<double>::quiet_NaN();

/// Metrics for one sample/reference pair; NaN marks a metric the inputs cannot support.
inline MetricReport evaluate_pair(const PointBlock& s, const PointBlock& r, const std::vector<int>* st,
                                  const std::vector<int>* rt, double spacing) {
  MetricReport m;
  m.chamfer = chamfer(s.pos, r.pos);
  m.iou = voxel_iou(s.pos, r.pos, spacing);
  m.nc = (s.has_normals && r.has_normals) ? normal_consistency(s.surf, r.surf) : kUnavailable;
  m.rmsd = (s.pos.size() == r.pos.size() && s.pos.size() >= 3) ? rmsd(s.pos, r.pos) : kUnavailable;
  m.aar = (st && rt) ? aar(*st, *rt) : kUnavailable;
  return m;
}

inline double nan_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) {
    if (std::isnan(x)) return kUnavailable;
    s += x;
  }
  return s / static_cast<double>(v.size());
}

inline void cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.str("samples").empty() || cfg.str("reference").empty())
    fail(ErrorKind::ConfigError, "eval needs both samples and reference");
  const auto samples = read_point_file(cfg.str("samples"));
  const auto reference = read_point_file(cfg.str("reference"));
  if (samples.size() != reference.size())
    fail(ErrorKind::FormatError, "samples have " + std::to_string(samples.size()) + " blocks, reference has " +
                                     std::to_string(reference.size()));
  std::vector<std::vector<int>> st, rt;
  const bool types = !cfg.str("sample_types").empty() || !cfg.str("reference_types").empty();
  if (types) {
    if (cfg.str("sample_types").empty() || cfg.str("reference_types").empty())
      fail(ErrorKind::ConfigError, "sample_types and reference_types go together");
    st = read_type_file(cfg.str("sample_types"));
    rt = read_type_file(cfg.str("reference_types"));
    if (st.size() != samples.size() || rt.size() != samples.size())
      fail(ErrorKind::FormatError, "type files must have one block per point block");
  }
  const double spacing = cfg.num("spacing");
  std::vector<MetricReport> per;
  for (std::size_t i = 0; i < samples.size(); ++i)
    per.push_back(evaluate_pair(samples[i], reference[i], types ? &st[i] : nullptr, types ? &rt[i] : nullptr, spacing));

  auto column = [&](double MetricReport::*f) {
    std::vector<double> v;
    for (const auto& m : per) v.push_back(m.*f);
    return v;
  };
  const MetricReport mean{nan_mean(column(&MetricReport::chamfer)), nan_mean(column(&MetricReport::nc)),
                          nan_mean(column(&MetricReport::iou)), nan_mean(column(&MetricReport::rmsd)),
                          nan_mean(column(&MetricReport::aar))};
  const fs::path out(cfg.str("out"));
  write_atomic(out / "metrics.json", [&](std::ostream& o) { write_report_json(o, mean); });
  write_atomic(out / "metrics_per_sample.dat", [&](std::ostream& o) {
    o << "# block chamfer nc iou rmsd aar\n";
    for (std::size_t i = 0; i < per.size(); ++i)
      o << i << ' ' << detail::fmt17(per[i].chamfer) << ' ' << detail::fmt17(per[i].nc) << ' '
        << detail::fmt17(per[i].iou) << ' ' << detail::fmt17(per[i].rmsd) << ' ' << detail::fmt17(per[i].aar) << '\n';
  });
  const std::vector<double> cd = column(&MetricReport::chamfer);
  const int bins = static_cast<int>(cfg.integer("hist_bins"));
  const double lo = *std::min_element(cd.begin(), cd.end());
  const double hi = *std::max_element(cd.begin(), cd.end());
  const double width = hi > lo ? (hi - lo) / bins : 1.0;
  std::vector<long> counts(static_cast<std::size_t>(bins), 0);
  for (double v : cd) ++counts[static_cast<std::size_t>(std::min(bins - 1, static_cast<int>((v - lo) / width)))];
  write_atomic(out / "chamfer_hist.dat", [&](std::ostream& o) {
    o << "# bin_lo bin_hi count\n";
    for (int b = 0; b < bins; ++b)
      o << detail::fmt17(lo + b * width) << ' ' << detail::fmt17(lo + (b + 1) * width) << ' ' << counts[b] << '\n';
  });
  echo_config(cfg, out);
}

// ---------------------------------------------------------------------------
// Surface

inline void cmd_surface(const RunConfig& cfg) {
  cfg.validate();
  const fs::path atoms_path = cfg.str("atoms").empty() ? data_dir(cfg) / "atoms.dat" : fs::path(cfg.str("atoms"));
  const std::vector<Atom> atoms = read_atoms(atoms_path.string());
  Rng rng = make_stream(cfg.seed(), "surface");
  auto pts = sample_surface(atoms, cfg.num("probe"), static_cast<int>(cfg.integer("surface_points")), rng);
  featurize_surface(pts, atoms);
  const fs::path out(cfg.str("out"));
  write_atomic(out / "surface.dat", [&](std::ostream& o) { write_points(o, pts); });
  echo_config(cfg, out);
}

}  // namespace mmflow

#endif  // MMFLOW_PIPELINE_HPP
