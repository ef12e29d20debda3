#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "partal/alcore.hpp"
#include "partal/data.hpp"

namespace partal {

/// Everything a run needs. Defaults are the reference configuration.
struct ExperimentConfig {
  // [dataset]
  std::filesystem::path dataset_path = "data/synthetic";
  GeneratorConfig generator;
  std::uint64_t dataset_seed = 0;
  // [model]
  NetConfig net;
  TrainConfig train;
  // [al]
  std::size_t initial_fully_labelled = 40;
  int iterations = 8;
  std::size_t budget_per_iteration = 36;
  std::size_t mc_passes = kDefaultMcPasses;
  std::vector<std::string> strategies{"partal", "random", "random_partial", "rbal", "coreset", "lloss"};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  /// Per-strategy budget of the hardest-examples probe.
  std::size_t probe_budget = 36;
  // [output]
  std::filesystem::path output_dir = "results";
  bool emit_plot_data = false;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  /// AL settings of one seed.
  ALConfig al_config(std::uint64_t seed) const;
};

/// INI text with sections [dataset] [model] [al] [output]. Unknown sections
/// or keys and malformed values throw ConfigError naming the key.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);
/// Semantic checks (budget divisibility, known strategies, ranges).
void validate_config(const ExperimentConfig& config);

/// Worker count from an explicit flag, else PARTAL_LAB_JOBS, else 1.
std::size_t resolve_jobs(int flag_value);

/// Runs fn(i) for i in [0, n) on `jobs` threads. Exceptions are rethrown
/// after all workers stop, lowest index first.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

struct RunSet {
  std::vector<ALRunRecord> runs;  // sorted by (strategy, seed)
  std::vector<std::uint64_t> seeds;
  std::vector<MetricsReport> full;  // parallel to seeds
};

/// AL runs for every (strategy, seed) plus one full-supervision run per
/// seed; delta_mtl is filled against the same seed's full-supervision run.
/// Strategy "partal_raw" selects PartAL without normalization.
RunSet run_strategies(const Dataset& dataset, const ExperimentConfig& config,
                      const std::vector<std::string>& strategies, const std::vector<std::uint64_t>& seeds,
                      std::size_t jobs);

void write_results_csv(std::ostream& out, const std::vector<ALRunRecord>& runs,
                       const std::vector<ModalitySpec>& modalities);
void write_delta_gap_csv(std::ostream& out, const RunSet& set, const std::vector<ModalitySpec>& modalities);
void write_full_supervision_csv(std::ostream& out, const RunSet& set, const std::vector<ModalitySpec>& modalities);

/// Writes runs/<strategy>_seed<N>.csv, results.csv (merged), delta_gap.csv
/// and full_supervision.csv under `dir`, plus results_long.csv when
/// `emit_plot_data` is set. Returns the merged CSV path.
std::filesystem::path write_run_outputs(const RunSet& set, const std::vector<ModalitySpec>& modalities,
                                        const std::filesystem::path& dir, bool emit_plot_data);

/// Long-format reshape: strategy,seed,iteration,labels_used,metric,value.
/// Throws IoError naming the offending line for malformed input.
void reshape_long(std::istream& in, std::ostream& out);

enum class AblationMode { Hardest, Inference, Normalization };
AblationMode parse_ablation_mode(const std::string& name);

/// Writes the ablation table for `mode` to `out`.
void run_ablation(const Dataset& dataset, const ExperimentConfig& config, AblationMode mode, std::size_t jobs,
                  std::ostream& out);

/// Formats a double for result files: shortest round-trip representation.
std::string format_number(double value);

}  // namespace partal
