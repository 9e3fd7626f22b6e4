// otgeo run|check|sweep <config.json>

#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "otgeo/runner.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kSolverError = 3;

int execute(const std::string& path, const std::string& out, bool verbose, bool validate_only, bool force_sweep) {
  using namespace otgeo;
  try {
    const std::string text = read_text_file(path);
    ExperimentConfig cfg = parse_config(parse_config_text(text));
    if (!out.empty()) cfg.out_dir = out;
    if (force_sweep && !cfg.sweep) {
      cfg.sweep = true;
      if (cfg.eps.size() < 2) cfg.eps = {0.2, 0.1, 0.05, 0.025};
    }
    if (validate_only) {
      prepare_inputs(cfg);
      std::cout << "config ok: " << path << " (sha256 " << sha256_hex(text) << ")\n";
      return 0;
    }
    const RunArtifacts art = run_experiment(cfg, text, verbose, std::cerr);
    for (const auto& e : art.diagnostics.entries)
      std::cout << (e.pass ? "PASS " : "FAIL ") << (e.required ? "required " : "advisory ") << e.name
                << " eps=" << format_double(e.eps) << " [" << e.threshold_label << "]\n";
    for (const auto& r : art.runs)
      std::cout << r.method << " eps=" << format_double(r.eps) << " objective=" << format_double(r.report.objective)
                << "\n";
    if (verbose)
      for (const auto& f : art.files) std::cerr << "wrote " << cfg.out_dir << "/" << f << "\n";
    return art.exit_code;
  } catch (const otgeo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const otgeo::FieldFormatError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "solver error: " << e.what() << "\n";
    return kSolverError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entropy-regularized dynamical optimal transport on circles and flat tori"};
  app.require_subcommand(1);
  std::string config, out;
  bool verbose = false;

  auto* run = app.add_subcommand("run", "solve, check and write artifacts");
  run->add_option("config", config, "experiment config (JSON)")->required();
  run->add_option("--out", out, "output directory (overrides the config)");
  run->add_flag("--verbose", verbose, "log solver progress and written files");

  auto* check = app.add_subcommand("check", "validate a config without solving");
  check->add_option("config", config, "experiment config (JSON)")->required();

  auto* sweep = app.add_subcommand("sweep", "run the eps sweep for a config");
  sweep->add_option("config", config, "experiment config (JSON)")->required();
  sweep->add_option("--out", out, "output directory (overrides the config)");
  sweep->add_flag("--verbose", verbose, "log solver progress and written files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kConfigError;
  }
  if (*check) return execute(config, out, false, true, false);
  if (*sweep) return execute(config, out, verbose, false, true);
  return execute(config, out, verbose, false, false);
}
