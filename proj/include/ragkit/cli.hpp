#pragma once

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "ragkit/pipeline.hpp"

namespace ragkit {

// Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"desk-scale retrieval-augmented generation pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string config_path;
  struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> mode, oracle, out;
    std::optional<int> k, n;
  } ov;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--seed", [&ov](const std::vector<std::string>& v) {
      ov.seed = std::stoull(v[0]);
      return true;
    }, "RNG seed (overrides config)");
    sub->add_option("--out", [&ov](const std::vector<std::string>& v) {
      ov.out = v[0];
      return true;
    }, "output directory");
    sub->add_option("--k", [&ov](const std::vector<std::string>& v) {
      ov.k = std::stoi(v[0]);
      return true;
    }, "decoder vectors per passage (0 = uncompressed)");
    sub->add_option("--n", [&ov](const std::vector<std::string>& v) {
      ov.n = std::stoi(v[0]);
      return true;
    }, "candidate passages per query");
    sub->add_option("--mode", [&ov](const std::vector<std::string>& v) {
      ov.mode = v[0];
      return true;
    }, "provenance mode: sp (re-rank) or ex (direct selection)")
        ->check(CLI::IsMember({"sp", "ex"}));
    sub->add_option("--oracle", [&ov](const std::vector<std::string>& v) {
      ov.oracle = v[0];
      return true;
    }, "oracle candidates: none, infuse, only")
        ->check(CLI::IsMember({"none", "infuse", "only"}));
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic task");
  CLI::App* train_ret =
      app.add_subcommand("train-retriever", "mine triples and train the retriever");
  CLI::App* index = app.add_subcommand("index", "build and persist the embedding index");
  CLI::App* retrieve = app.add_subcommand("retrieve", "produce candidate files");
  CLI::App* train_gen =
      app.add_subcommand("train-generator", "train the fused generator");
  CLI::App* evaluate = app.add_subcommand("evaluate", "inference + metrics report");
  CLI::App* bench = app.add_subcommand("bench", "phase timings and Pareto sweep");
  for (CLI::App* sub : {synth, train_ret, index, retrieve, train_gen, evaluate, bench})
    add_common(sub);

  CLI::App* report = app.add_subcommand("report", "merge evaluation reports");
  std::vector<std::string> report_inputs;
  report->add_option("paths", report_inputs, "report.json files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (report->parsed()) {
      std::cout << cmd_report(report_inputs);
      return 0;
    }
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.out) cfg.out_dir = *ov.out;
    if (ov.k) cfg.k = *ov.k;
    if (ov.n) cfg.n = *ov.n;
    if (ov.mode) cfg.mode = *ov.mode;
    if (ov.oracle) cfg.oracle = *ov.oracle;

    if (synth->parsed()) cmd_synth(cfg);
    else if (train_ret->parsed()) cmd_train_retriever(cfg);
    else if (index->parsed()) cmd_index(cfg);
    else if (retrieve->parsed()) cmd_retrieve(cfg);
    else if (train_gen->parsed()) cmd_train_generator(cfg);
    else if (evaluate->parsed()) cmd_evaluate(cfg);
    else if (bench->parsed()) cmd_bench(cfg);
    return 0;
  } catch (const numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace ragkit
