#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <vector>

#include "partal/model.hpp"
#include "partal/numerics.hpp"
#include "partal/uncertainty.hpp"

namespace partal {

struct PairId {
  std::int64_t sample = 0;
  std::size_t modality = 0;

  friend auto operator<=>(const PairId&, const PairId&) = default;
};

/// Pairs to annotate; cost is one label unit per pair. `exhausted` is set
/// when fewer candidates than requested were available.
struct AcquisitionBatch {
  std::vector<PairId> pairs;
  bool exhausted = false;

  std::size_t cost() const { return pairs.size(); }
};

/// The `budget` candidate pairs with the largest score; ties go to the lower
/// (sample_id, modality). `scores` is row-major over the matrix rows.
AcquisitionBatch select_top_pairs(const UncertaintyMatrix& matrix, std::span<const double> scores,
                                  std::size_t budget);

/// Top pairs by normalized uncertainty.
AcquisitionBatch select_partal(const UncertaintyMatrix& matrix, std::size_t budget);

/// budget/K whole images drawn uniformly; budget must be a multiple of K.
AcquisitionBatch select_random_full(std::span<const std::int64_t> unlabelled_images,
                                    std::size_t budget, std::size_t num_modalities, SeededRng& rng);

/// `budget` pairs drawn uniformly without replacement.
AcquisitionBatch select_random_partial(std::span<const PairId> candidates, std::size_t budget,
                                       SeededRng& rng);

/// Ranking-based selection over fully unlabelled rows: per modality rank by
/// descending raw uncertainty (0 = most uncertain), sum the ranks and take
/// the budget/K images with the smallest sum.
AcquisitionBatch select_rbal(const UncertaintyMatrix& matrix, std::size_t budget,
                             std::size_t num_modalities);

/// Farthest-point greedy on rows of `features` ([N, d]). Returns the k
/// added indices in selection order. With no initial centers the first
/// pick is the lowest index.
std::vector<std::size_t> kcenter_greedy(const Tensor& features,
                                        std::span<const std::size_t> initial_centers, std::size_t k);

/// Largest distance from any row to its nearest center.
double covering_radius(const Tensor& features, std::span<const std::size_t> centers);

/// Core-set selection on encoder features, labelled images as initial centers.
AcquisitionBatch select_coreset(const MultiTaskNet& net,
                                std::span<const SampleRecord* const> unlabelled,
                                std::span<const SampleRecord* const> labelled, std::size_t budget,
                                std::size_t num_modalities);

/// budget/K images with the highest loss predicted by the aux head.
AcquisitionBatch select_learning_loss(const MultiTaskNet& net,
                                      std::span<const SampleRecord* const> unlabelled,
                                      std::size_t budget, std::size_t num_modalities);

/// Top-n indices of `scores` (descending, ties to lower index).
std::vector<std::size_t> top_indices(std::span<const double> scores, std::size_t n);

}  // namespace partal
