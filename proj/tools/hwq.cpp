#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hwq/cli.hpp"

namespace {

std::optional<unsigned> threads_from_env() {
  const char* v = std::getenv("HWQ_THREADS");
  if (!v || !*v) return std::nullopt;
  try {
    const long n = std::stol(v);
    if (n < 1) throw std::invalid_argument("");
    return static_cast<unsigned>(n);
  } catch (const std::exception&) {
    throw hwq::Error(hwq::Errc::SchemaError, "HWQ_THREADS must be a positive integer, got '" + std::string(v) + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  using namespace hwq::cli;

  CLI::App app{"Multiclass many-server queue experiments"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  for (auto cmd : {Command::Validate, Command::Exact, Command::Simulate, Command::Couple, Command::Verify,
                   Command::Sweep}) {
    auto* sub = app.add_subcommand(std::string(to_string(cmd)));
    sub->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--threads", threads, "worker threads (fallback: HWQ_THREADS)")->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    const Command cmd = parse_command(app.get_subcommands().front()->get_name());
    ExperimentConfig cfg = parse_config_file(config_path);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    else if (auto env = threads_from_env()) cfg.threads = *env;

    const RunResult res = dispatch(cmd, cfg, out_dir);
    std::cout << to_string(cmd) << ": " << res.summary << "\n";
    for (const auto& f : res.outputs) std::cout << "  " << out_dir << "/" << f << "\n";
    return res.exit_code;
  } catch (const hwq::Error& e) {
    std::cerr << "hwq: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "hwq: internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}
