#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnembed/runner.hpp"

namespace {

struct SubArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> sets;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-weight embeddings for time-series forecasting"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> subcommands = {
      {"synth", "emit the synthetic f1/f2 series as CSV"},
      {"train", "train a model and write metrics, history, and a checkpoint"},
      {"eval", "evaluate a checkpoint on the test split"},
      {"compare", "train attention and patch embeddings under shared seeds"},
      {"ablate", "train the full model and its no-EMA / no-landmark variants"},
      {"scan", "sweep one embedding parameter over a value grid"},
      {"theory", "Monte Carlo separation report for clustered Gaussians"},
      {"rank", "per-layer relative residual norms across embedding modes"},
      {"gradcheck", "compare analytic gradients against central differences"}};

  std::map<std::string, SubArgs> args;
  for (const auto& [name, desc] : subcommands) {
    auto* sub = app.add_subcommand(name, desc);
    auto& a = args[name];
    sub->add_option("--config", a.config_path, "JSON config file (defaults apply when omitted)");
    sub->add_option("--set", a.sets, "override a config key, e.g. --set model.embed.ema_alpha=0.5");
    sub->add_option("--out", a.out_dir, "output directory")->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  const SubArgs& a = args[name];
  try {
    attnembed::RunConfig cfg = attnembed::load_config(a.config_path, a.sets);
    return attnembed::run_subcommand(name, cfg, a.out_dir);
  } catch (const attnembed::ConfigError& e) {
    std::cerr << nlohmann::json{{"error", "config"}, {"message", e.what()}, {"exit", 2}}.dump()
              << "\n";
    return 2;
  } catch (const attnembed::IoError& e) {
    std::cerr << nlohmann::json{{"error", "io"}, {"message", e.what()}, {"exit", 4}}.dump() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "internal"}, {"message", e.what()}, {"exit", 1}}.dump()
              << "\n";
    return 1;
  }
}
