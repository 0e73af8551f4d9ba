// Batch front-end: trapcert --config run.json [--mode m] [--out dir] [--jobs n]

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "trapcert/report.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Trapped-mode certification for bent fractional waveguides"};
  std::string config_path, mode, out;
  int jobs = 0;
  app.add_option("--config", config_path, "JSON run configuration")->required()->check(CLI::ExistingFile);
  app.add_option("--mode", mode, "override the configured mode")
      ->check(CLI::IsMember({"cross-section", "extend", "certify", "spectrum", "sweep", "verify-identities"}));
  app.add_option("--out", out, "output directory (default: the configured one)");
  app.add_option("--jobs", jobs, "worker threads for sweeps")->check(CLI::PositiveNumber);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : trapcert::exit_config;
  }

  try {
    const std::string text = trapcert::detail::read_file(config_path);
    trapcert::RunConfig cfg = trapcert::parse_config(text, config_path, mode);
    if (jobs > 0) {
      cfg.jobs = jobs;
      cfg.resolved["jobs"] = jobs;
    }
    const std::filesystem::path dir = out.empty() ? std::filesystem::path(cfg.output) : std::filesystem::path(out);
    const auto outcome = trapcert::run(cfg, dir, trapcert::DiskCache::from_environment());
    std::cout << outcome.report_path.string() << ": " << outcome.report.value("status", std::string("?")) << "\n";
    if (outcome.report.contains("error")) std::cerr << outcome.report["error"]["message"].get<std::string>() << "\n";
    return outcome.exit_code;
  } catch (const trapcert::ConfigurationError& e) {
    std::cerr << e.what() << "\n";
    return trapcert::exit_config;
  } catch (const trapcert::InputError& e) {
    std::cerr << e.what() << "\n";
    return trapcert::exit_config;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return trapcert::exit_failure;
  }
}
