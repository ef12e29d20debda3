#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "partal/acquisition.hpp"
#include "partal/data.hpp"
#include "partal/metrics.hpp"
#include "partal/model.hpp"
#include "partal/uncertainty.hpp"

namespace partal {

enum class Strategy { PartAL, Random, RandomPartial, RBAL, Coreset, LLoss };

std::string to_string(Strategy strategy);
/// Throws ConfigError listing the valid names.
Strategy parse_strategy(const std::string& name);
const std::vector<Strategy>& all_strategies();
/// Strategies that label whole images.
bool labels_full_images(Strategy strategy);

/// Labelled bits per (sample, modality) of the training pool. Bits only flip
/// from false to true.
class LabelState {
 public:
  LabelState(std::size_t num_samples, std::size_t num_modalities);

  std::size_t num_samples() const { return num_samples_; }
  std::size_t num_modalities() const { return num_modalities_; }
  bool labelled(std::size_t sample, std::size_t k) const { return bits_[sample * num_modalities_ + k] != 0; }
  /// Throws std::logic_error when the pair is already labelled.
  void reveal(const PairId& pair);
  std::size_t labelled_count() const { return count_; }
  bool any_labelled(std::size_t sample) const;
  bool fully_labelled(std::size_t sample) const;
  bool fully_unlabelled(std::size_t sample) const { return !any_labelled(sample); }
  ModalityMask row(std::size_t sample) const;

  std::vector<std::int64_t> initial_set;

 private:
  std::size_t num_samples_;
  std::size_t num_modalities_;
  std::vector<std::uint8_t> bits_;
  std::size_t count_ = 0;
};

/// Simulated annotator. Reveals requested pairs and charges one unit each.
/// With poisoning, every unrevealed training target reads as NaN.
class Oracle {
 public:
  Oracle(const Dataset& dataset, std::size_t cap, bool poison_unrevealed);

  /// Throws std::logic_error when the cap would be exceeded.
  void reveal(const AcquisitionBatch& batch, LabelState& state);
  std::size_t spent() const { return spent_; }
  std::size_t cap() const { return cap_; }
  /// Training records as the learner may see them.
  const std::vector<SampleRecord>& view() const;

 private:
  const Dataset* dataset_;
  std::size_t cap_;
  std::size_t spent_ = 0;
  bool poison_;
  std::vector<SampleRecord> poisoned_;
};

struct ALConfig {
  std::size_t initial_fully_labelled = 40;
  int iterations = 8;
  std::size_t budget_per_iteration = 36;
  TrainConfig train;
  NetConfig net;
  std::size_t mc_passes = kDefaultMcPasses;
  std::uint64_t seed = 0;
  /// false runs PartAL directly on raw entropies.
  bool normalize = true;
  bool poison_unrevealed = false;
};

struct ALIterationRecord {
  int iteration = 0;
  std::size_t labels_used = 0;
  std::size_t revealed = 0;
  MetricsReport metrics;
  double wall_seconds = 0.0;
  std::optional<std::uint64_t> normalization_hash;
};

struct ALRunRecord {
  Strategy strategy = Strategy::PartAL;
  std::string strategy_name;
  std::uint64_t seed = 0;
  std::vector<ALIterationRecord> iterations;
  bool exhausted = false;
  std::optional<NormalizationParams> normalization;
  std::size_t oracle_spent = 0;
};

/// Test-set metrics of stage-2 predictions, dropout off. `inject` optionally
/// provides ground truth per sample (empty: none).
MetricsReport evaluate(const MultiTaskNet& net, std::span<const SampleRecord* const> samples,
                       std::span<const ModalityMask> inject = {});
MetricsReport evaluate(const MultiTaskNet& net, const std::vector<SampleRecord>& samples);

/// Fully labelled images at the start, identical for every strategy of a seed.
std::vector<std::int64_t> initial_labelled_set(std::size_t num_samples, std::size_t count,
                                               std::uint64_t seed);

/// Image-wise raw uncertainties of every image with at least one unlabelled
/// modality, computed with that image's known labels injected.
UncertaintyMatrix compute_uncertainty(const MultiTaskNet& net,
                                      const std::vector<SampleRecord>& pool,
                                      const LabelState& state, std::size_t passes,
                                      const SeededRng& rng, bool fully_unlabelled_only = false);

/// The active-learning loop. Iteration 0 trains on the initial set; each
/// further iteration acquires, reveals, retrains and evaluates. When
/// `reference` is given, delta_mtl is filled against it.
ALRunRecord run_al(const Dataset& dataset, Strategy strategy, const ALConfig& config,
                   const MetricsReport* reference = nullptr);

struct FullSupervision {
  MetricsReport metrics;
  MultiTaskNet net;
};

/// Train on every label of every training sample.
FullSupervision run_full_supervision(const Dataset& dataset, const ALConfig& config);

/// Per-modality M_run(final) - M_full, in native units, ordered as `full`.
std::vector<double> delta_gap(const ALRunRecord& run, const MetricsReport& full);

struct HardestRow {
  std::string strategy;
  std::size_t images = 0;
  std::size_t pairs = 0;
  std::vector<MetricEntry> metrics;
};

/// Model error on the images each strategy would select from the same
/// pool snapshot. Budget 0 gives an empty report.
std::vector<HardestRow> hardest_examples_probe(const MultiTaskNet& net,
                                               const std::vector<SampleRecord>& pool,
                                               const LabelState& state,
                                               std::span<const Strategy> strategies,
                                               std::size_t per_strategy_budget,
                                               const ALConfig& config);

struct InferenceRow {
  std::vector<std::size_t> provided;
  std::size_t target = 0;
  MetricEntry metric;
};

/// Stage-2 metric of every target t for every proper subset S of the other
/// modalities, with ground truth of S injected. Rows grouped by |S|.
std::vector<InferenceRow> partial_inference_probe(const MultiTaskNet& net,
                                                  const std::vector<SampleRecord>& test);

/// Error-style comparison: true when `a` is at least as good as `b`.
bool at_least_as_good(const MetricEntry& a, const MetricEntry& b);

}  // namespace partal
