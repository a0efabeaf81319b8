// Experiment grid driver: prepare corpora, train the encoding grid,
// evaluate, run the analyses, and join the results.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poslab/experiment.hpp"

namespace {

poslab::ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  return poslab::ExperimentConfig::from_json(poslab::json::parse(is));
}

std::vector<std::string> split_cells(const std::string& cells) {
  std::vector<std::string> out;
  std::istringstream is(cells);
  std::string part;
  while (std::getline(is, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"poslab: positional-encoding laboratory for tiny bilingual masked LMs"};
  app.require_subcommand(1);

  std::string config_path;
  std::string cells;
  int workers = 1;
  bool resume = true;
  app.add_option("--config", config_path, "experiment config JSON")->required();
  app.add_option("--cells", cells, "comma-separated substrings selecting grid cells");
  app.add_option("--workers", workers, "parallel cells during training");
  app.add_flag("--resume,!--fresh", resume,
               "skip completed cells and continue partial ones (default on)");

  auto* prepare = app.add_subcommand("prepare", "build BPE and paired corpora");
  auto* train = app.add_subcommand("train", "train one model per grid cell");
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints into results.csv");
  auto* analyze = app.add_subcommand("analyze", "emit figure-data CSVs");
  auto* report = app.add_subcommand("report", "join eval and analysis into summary.csv");

  CLI11_PARSE(app, argc, argv);

  try {
    poslab::ExperimentConfig cfg = load_config(config_path);
    std::vector<std::string> cell_filter = split_cells(cells);
    int failures = 0;
    if (prepare->parsed()) {
      poslab::cmd_prepare(cfg);
    } else if (train->parsed()) {
      failures = poslab::cmd_train(cfg, cell_filter, workers, resume);
    } else if (eval->parsed()) {
      failures = poslab::cmd_eval(cfg, cell_filter);
    } else if (analyze->parsed()) {
      failures = poslab::cmd_analyze(cfg, cell_filter);
    } else if (report->parsed()) {
      failures = poslab::cmd_report(cfg);
    }
    return failures == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
