#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "partal/data.hpp"
#include "partal/errors.hpp"
#include "partal/experiment.hpp"

namespace fs = std::filesystem;
using namespace partal;

namespace {

enum ExitCode { kOk = 0, kConfigError = 2, kIoError = 3, kNumericError = 4 };

ExperimentConfig config_from(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_config(path);
}

Dataset load_for(const ExperimentConfig& config) {
  if (!fs::exists(manifest_path(config.dataset_path))) {
    throw IoError("dataset not found at " + config.dataset_path.string() + "; run 'partal_lab generate' first");
  }
  return load_dataset(config.dataset_path);
}

int cmd_generate(const std::string& config_path, const std::string& out) {
  auto config = config_from(config_path);
  if (!out.empty()) config.dataset_path = out;
  const auto dataset = generate_dataset(config.generator, config.dataset_seed);
  if (const auto parent = config.dataset_path.parent_path(); !parent.empty()) fs::create_directories(parent);
  save_dataset(dataset, config.dataset_path);
  std::cout << "wrote " << manifest_path(config.dataset_path).string() << " and "
            << blob_path(config.dataset_path).string() << '\n'
            << "train " << dataset.train.size() << ", test " << dataset.test.size() << ", " << dataset.height << 'x'
            << dataset.width << '\n'
            << "modalities:";
  for (const auto& m : dataset.modalities) std::cout << ' ' << m.name << '(' << m.channels << ')';
  std::cout << '\n';
  return kOk;
}

int cmd_run(const std::string& config_path, const std::string& out, std::vector<std::string> strategies,
            std::vector<std::uint64_t> seeds, int jobs) {
  auto config = config_from(config_path);
  if (!out.empty()) config.output_dir = out;
  if (!strategies.empty()) config.strategies = strategies;
  if (!seeds.empty()) config.seeds = seeds;
  validate_config(config);
  const auto dataset = load_for(config);
  const auto set = run_strategies(dataset, config, config.strategies, config.seeds, resolve_jobs(jobs));
  const auto merged = write_run_outputs(set, dataset.modalities, config.output_dir, config.emit_plot_data);
  std::cout << "wrote " << set.runs.size() << " runs to " << merged.string() << '\n';
  return kOk;
}

int cmd_ablate(const std::string& config_path, const std::string& out, const std::string& mode_name, int jobs) {
  const auto mode = parse_ablation_mode(mode_name);
  auto config = config_from(config_path);
  if (!out.empty()) config.output_dir = out;
  const auto dataset = load_for(config);
  fs::create_directories(config.output_dir);
  const auto path = config.output_dir / ("ablation_" + mode_name + ".csv");
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot write " + path.string());
  run_ablation(dataset, config, mode, resolve_jobs(jobs), file);
  file.close();
  if (!file) throw IoError("failed writing " + path.string());
  std::cout << "wrote " << path.string() << '\n';
  return kOk;
}

int cmd_plotdata(const std::string& results, const std::string& out) {
  std::ifstream in(results, std::ios::binary);
  if (!in) throw IoError("cannot read " + results);
  if (out.empty()) {
    reshape_long(in, std::cout);
    return kOk;
  }
  std::ofstream file(out, std::ios::binary);
  if (!file) throw IoError("cannot write " + out);
  reshape_long(in, file);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partial-label multi-task active learning on synthetic scenes"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  std::vector<std::string> strategies;
  std::vector<std::uint64_t> seeds;
  int jobs = 0;
  std::string mode;
  std::string results;

  auto* gen = app.add_subcommand("generate", "Generate the synthetic dataset");
  gen->add_option("--config", config_path, "INI config file");
  gen->add_option("--out", out, "Dataset stem (writes <stem>.json and <stem>.bin)");

  auto* run = app.add_subcommand("run", "Run active learning for each (strategy, seed)");
  run->add_option("--config", config_path, "INI config file");
  run->add_option("--out", out, "Output directory");
  run->add_option("--strategy", strategies, "Strategies (default: from config)");
  run->add_option("--seed", seeds, "Seeds (default: from config)");
  run->add_option("--jobs", jobs, "Parallel runs (default: PARTAL_LAB_JOBS or 1)");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation study");
  ablate->add_option("--config", config_path, "INI config file");
  ablate->add_option("--out", out, "Output directory");
  ablate->add_option("--mode", mode, "hardest | inference | normalization")->required();
  ablate->add_option("--jobs", jobs, "Parallel runs (default: PARTAL_LAB_JOBS or 1)");

  auto* plot = app.add_subcommand("plotdata", "Reshape a results CSV to long format");
  plot->add_option("--results", results, "Merged results CSV")->required();
  plot->add_option("--out", out, "Output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) return cmd_generate(config_path, out);
    if (*run) return cmd_run(config_path, out, strategies, seeds, jobs);
    if (*ablate) return cmd_ablate(config_path, out, mode, jobs);
    return cmd_plotdata(results, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericError;
  }
}
