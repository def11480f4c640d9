#ifndef MMFLOW_CONFIG_HPP
#define MMFLOW_CONFIG_HPP

// Flat key=value run configuration. Every key has a default; unknown keys are
// rejected. The effective configuration is echoed next to every output.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mmflow/error.hpp"

namespace mmflow {

struct ConfigKey {
  const char* name;
  const char* fallback;
  const char* help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"seed", "42", "master seed for all random streams"},
      {"out", "out", "output directory"},
      {"data", "", "dataset directory written by synth (defaults to out)"},
      {"flow", "pos", "pos, so3, torus, cat, con or joint"},
      {"pos_data", "eight", "position dataset: eight (Gaussian ring) or clusters (two labelled clusters)"},
      {"steps", "100", "Euler steps when sampling"},
      {"iterations", "2000", "optimizer steps"},
      {"batch", "256", "samples per modality per step"},
      {"log_every", "100", "iterations per loss-log row and scheduler evaluation"},
      {"lr", "0.0005", "initial learning rate"},
      {"clip", "1.0", "global gradient-norm clip (0 disables)"},
      {"plateau_factor", "0.8", "learning-rate decay on plateau"},
      {"plateau_patience", "10", "evaluations without improvement before decay"},
      {"min_lr", "0.000005", "learning-rate floor"},
      {"hidden", "128", "hidden width of the vector-field networks"},
      {"depth", "3", "hidden layers of the vector-field networks"},
      {"activation", "silu", "relu or silu"},
      {"cond_dim", "8", "condition embedding size"},
      {"p_uncond", "0.1", "probability of replacing the condition by null during training"},
      {"guidance", "0", "classifier-free guidance weight when sampling"},
      {"condition", "null", "null, cyclic or disulfide"},
      {"trajectory", "", "comma-separated times, or all, to record while sampling"},
      {"num_samples", "1024", "samples to draw"},
      {"lambda_pos", "0.2", "position loss weight"},
      {"lambda_ori", "0.2", "orientation loss weight"},
      {"lambda_cat", "1.0", "categorical loss weight"},
      {"lambda_con", "1.0", "continuous-feature loss weight"},
      {"lambda_str", "1.0", "internal-structure loss weight"},
      {"con_norm", "squared", "squared or unsquared continuous-feature loss"},
      {"rate_norm", "support", "support or literal rate normalization"},
      {"n_data", "4096", "samples per synthetic dataset"},
      {"radius", "4.0", "ring radius of the eight-Gaussian data"},
      {"stddev", "0.2", "component standard deviation of the eight-Gaussian data"},
      {"so3_modes", "4", "number of rotation modes"},
      {"torsion_dims", "4", "torsion angles per residue"},
      {"peptides", "16", "synthetic peptides"},
      {"residues", "8", "residues per synthetic peptide"},
      {"atoms", "", "atom file for the surface command"},
      {"probe", "1.4", "solvent probe radius"},
      {"surface_points", "400", "approximate surface points per structure"},
      {"spacing", "1.0", "voxel size for IoU"},
      {"samples", "", "sample file for eval"},
      {"reference", "", "reference file for eval"},
      {"sample_types", "", "sampled residue types for eval"},
      {"reference_types", "", "reference residue types for eval"},
      {"checkpoint", "", "checkpoint path (defaults to <out>/checkpoint.mflw)"},
      {"hist_bins", "20", "bins of the per-sample histogram written by eval"},
  };
  return keys;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.fallback;
  }

  static bool known(const std::string& key) {
    for (const auto& k : config_keys())
      if (key == k.name) return true;
    return false;
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) fail(ErrorKind::ConfigError, "unknown configuration key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) fail(ErrorKind::ConfigError, "unknown configuration key '" + key + "'");
    return it->second;
  }

  double num(const std::string& key) const {
    const std::string& s = str(key);
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) fail(ErrorKind::ConfigError, key + ": not a number: '" + s + "'");
    return v;
  }

  long integer(const std::string& key) const {
    const std::string& s = str(key);
    long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) fail(ErrorKind::ConfigError, key + ": not an integer: '" + s + "'");
    return v;
  }

  std::uint64_t seed() const {
    const std::string& s = str("seed");
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) fail(ErrorKind::ConfigError, "seed: not a u64: '" + s + "'");
    return v;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Reads key=value lines; '#' starts a comment; surrounding blanks are trimmed.
  void load(std::istream& in, const std::string& source) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        fail(ErrorKind::ConfigError, source + ":" + std::to_string(lineno) + ": expected key=value");
      set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::ConfigError, "cannot open config file " + path);
    load(in, path);
  }

  void write(std::ostream& out) const {
    for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
  }

  /// Range checks shared by all commands.
  void validate() const {
    auto at_least = [&](const char* k, long lo) {
      if (integer(k) < lo) fail(ErrorKind::ConfigError, std::string(k) + " must be >= " + std::to_string(lo));
    };
    auto positive = [&](const char* k) {
      if (!(num(k) > 0.0)) fail(ErrorKind::ConfigError, std::string(k) + " must be positive");
    };
    auto nonneg = [&](const char* k) {
      if (!(num(k) >= 0.0)) fail(ErrorKind::ConfigError, std::string(k) + " must be nonnegative");
    };
    auto one_of = [&](const char* k, std::initializer_list<const char*> opts) {
      for (const char* o : opts)
        if (str(k) == o) return;
      fail(ErrorKind::ConfigError, std::string(k) + ": unsupported value '" + str(k) + "'");
    };
    seed();
    at_least("steps", 1);
    at_least("iterations", 0);
    at_least("batch", 1);
    at_least("log_every", 1);
    at_least("plateau_patience", 1);
    at_least("hidden", 1);
    at_least("depth", 1);
    at_least("cond_dim", 1);
    at_least("num_samples", 1);
    at_least("n_data", 2);
    at_least("so3_modes", 1);
    at_least("torsion_dims", 1);
    at_least("peptides", 1);
    at_least("residues", 1);
    at_least("surface_points", 1);
    at_least("hist_bins", 1);
    for (const char* k : {"lr", "min_lr", "radius", "stddev", "spacing"}) positive(k);
    for (const char* k : {"clip", "guidance", "probe", "lambda_pos", "lambda_ori", "lambda_cat", "lambda_con",
                          "lambda_str"})
      nonneg(k);
    const double pf = num("plateau_factor");
    if (!(pf > 0.0 && pf <= 1.0)) fail(ErrorKind::ConfigError, "plateau_factor must lie in (0, 1]");
    const double pu = num("p_uncond");
    if (!(pu >= 0.0 && pu <= 1.0)) fail(ErrorKind::ConfigError, "p_uncond must lie in [0, 1]");
    one_of("flow", {"pos", "so3", "torus", "cat", "con", "joint"});
    one_of("pos_data", {"eight", "clusters"});
    one_of("activation", {"relu", "silu"});
    one_of("condition", {"null", "cyclic", "disulfide"});
    one_of("con_norm", {"squared", "unsquared"});
    one_of("rate_norm", {"support", "literal"});
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace mmflow

#endif  // MMFLOW_CONFIG_HPP
