// Command-line front end: `run` trains and evaluates, `report` renders
// tables and curves from finished runs.
//
// Exit codes: 0 ok, 2 configuration error, 3 training aborted.

#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cvt/experiment.hpp"

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      seeds.push_back(v);
    } catch (const std::exception&) {
      throw cvt::ConfigError("--seeds: '" + item + "' is not a non-negative integer");
    }
  }
  if (seeds.empty()) throw cvt::ConfigError("--seeds: no seeds given");
  return seeds;
}

std::vector<std::string> parse_protocols(const std::string& text) {
  if (text == "both") return {"task_free", "task_aware"};
  cvt::parse_protocol(text);
  return {text};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online continual learning with a contrastive external-attention transformer"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train and evaluate one method over one or more seeds");
  std::string config_path, method, seeds, protocol, out;
  run->add_option("--config", config_path, "JSON experiment config")->required();
  run->add_option("--method", method, "cvt | cvt_no_fc | cvt_scl | cvt_no_dual | sgd_baseline | er_baseline");
  run->add_option("--seeds", seeds, "comma-separated seeds, e.g. 0,1,2");
  run->add_option("--protocol", protocol, "task_free | task_aware | both");
  run->add_option("--out", out, "output directory");

  auto* report = app.add_subcommand("report", "write report.md and curve plots for finished runs");
  std::string in_dir;
  report->add_option("--in", in_dir, "output directory of one or more runs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) {
      auto cfg = cvt::load_experiment_config(config_path);
      if (!method.empty()) cfg.method = method;
      if (!seeds.empty()) cfg.seeds = parse_seeds(seeds);
      if (!protocol.empty()) cfg.protocols = parse_protocols(protocol);
      if (!out.empty()) cfg.output_dir = out;
      const auto summary = cvt::run_experiment(cfg);
      std::cout << cvt::summary_table({summary});
      return 0;
    }
    for (const auto& path : cvt::emit_report(in_dir)) std::cout << "wrote " << path.string() << '\n';
    return 0;
  } catch (const cvt::TrainingAbort& e) {
    std::cerr << "training aborted in " << e.component() << ": " << e.what() << " (partial results kept)\n";
    return 3;
  } catch (const cvt::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
