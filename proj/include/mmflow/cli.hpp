#ifndef MMFLOW_CLI_HPP
#define MMFLOW_CLI_HPP

// Command-line front end. Exit codes: 0 success, 2 configuration error,
// 3 data error, 4 numeric failure.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>

#include "mmflow/config.hpp"
#include "mmflow/error.hpp"
#include "mmflow/pipeline.hpp"

namespace mmflow {

enum ExitCode { kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitNumeric = 4 };

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::ConfigError:
    case ErrorKind::InvalidArgument: return kExitConfig;
    case ErrorKind::NumericFailure:
    case ErrorKind::AngleNearPi: return kExitNumeric;
    default: return kExitData;
  }
}

inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-modal flow matching toolkit", "mmflow"};
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, std::string> overrides;
  const std::pair<const char*, const char*> commands[] = {
      {"synth", "write toy datasets"},
      {"train", "train a flow family and write a checkpoint and loss log"},
      {"sample", "integrate a trained flow from its prior"},
      {"eval", "compare samples to a reference and write a metric report"},
      {"surface", "sample and featurize the surface of an atom file"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "key=value configuration file");
    for (const ConfigKey& k : config_keys())
      sub->add_option_function<std::string>(std::string("--") + k.name,
                                            [&overrides, key = std::string(k.name)](const std::string& v) {
                                              overrides[key] = v;
                                            },
                                            std::string(k.help) + " (default: " + k.fallback + ")");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, std::cout, err);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    if (cmd == "synth")
      cmd_synth(cfg);
    else if (cmd == "train")
      cmd_train(cfg);
    else if (cmd == "sample")
      cmd_sample(cfg);
    else if (cmd == "eval")
      cmd_eval(cfg);
    else
      cmd_surface(cfg);
  } catch (const Error& e) {
    err << "mmflow " << cmd << ": " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "mmflow " << cmd << ": IoError: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}

}  // namespace mmflow

#endif  // MMFLOW_CLI_HPP
