#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "partal/model.hpp"
#include "partal/numerics.hpp"

namespace partal {

inline constexpr double kVarianceFloor = 1e-8;
inline constexpr std::size_t kDefaultMcPasses = 20;

/// MC-dropout statistics for one sample. For categorical modalities `mean`
/// holds the averaged class probabilities [C, H, W] and `variance` is empty;
/// for continuous ones `mean`/`variance` are [dim, H, W] with the unbiased
/// variance floored at kVarianceFloor.
struct McSummary {
  std::size_t passes = 0;
  std::vector<Tensor> mean;
  std::vector<Tensor> variance;
};

/// D dropout-active forward passes of one sample. Stage-2 outputs are summarised.
McSummary mc_predict(const MultiTaskNet& net, const Tensor& x, const LabelInjection& injection,
                     std::size_t passes, SeededRng& rng);

/// Batched variant: sample i draws its dropout masks from base.split(sample_id),
/// so grouping changes results only by float rounding.
std::vector<McSummary> mc_predict_many(const MultiTaskNet& net,
                                       std::span<const SampleRecord* const> samples,
                                       std::span<const ModalityMask> inject, std::size_t passes,
                                       const SeededRng& base);

/// Per-pixel Shannon entropy (nats) of [C, H, W] probabilities; 0 ln 0 = 0.
Tensor shannon_entropy_map(const Tensor& probabilities);

/// Per-pixel differential entropy of a diagonal Gaussian, variances [dim, H, W].
/// Variances below kVarianceFloor are clamped up to it.
Tensor gaussian_entropy_map(const Tensor& variance);

/// Mean of all pixels of an entropy map.
double image_uncertainty(const Tensor& entropy_map);

/// Image-wise uncertainty per modality of one MC summary.
std::vector<double> image_uncertainties(const McSummary& summary,
                                        std::span<const ModalitySpec> modalities);

struct UncertaintyMatrix {
  std::vector<std::int64_t> sample_ids;
  std::size_t num_modalities = 0;
  /// Row-major N x K.
  std::vector<double> raw;
  std::vector<double> normalized;
  std::vector<std::uint8_t> candidate;

  std::size_t rows() const { return sample_ids.size(); }
  double raw_at(std::size_t i, std::size_t k) const { return raw[i * num_modalities + k]; }
  double normalized_at(std::size_t i, std::size_t k) const { return normalized[i * num_modalities + k]; }
  bool is_candidate(std::size_t i, std::size_t k) const { return candidate[i * num_modalities + k] != 0; }
};

struct NormalizationParams {
  std::vector<double> u_min;
  std::vector<double> u_max;
  int frozen_at_iteration = 0;

  std::uint64_t hash() const;
  friend bool operator==(const NormalizationParams&, const NormalizationParams&) = default;
};

/// Per-modality min/max over candidate entries (all entries when the mask is empty).
/// Throws std::invalid_argument for fewer than two rows or a zero spread.
NormalizationParams fit_normalization(const UncertaintyMatrix& matrix, int iteration);

/// Min-max normalization without clamping.
std::vector<double> apply_normalization(const UncertaintyMatrix& matrix,
                                        const NormalizationParams& params);

/// Holds the parameters fitted at the first acquisition and refuses refits.
class FrozenNormalization {
 public:
  const NormalizationParams& fit(const UncertaintyMatrix& matrix, int iteration);
  bool frozen() const { return params_.has_value(); }
  const NormalizationParams& params() const;

 private:
  std::optional<NormalizationParams> params_;
};

/// Shannon entropy of a density discretised into bins of width eps on
/// [a, b]. Each bin mass is the integral of the density over the bin
/// (Gauss-Legendre quadrature). Adding ln(eps) approximates the
/// differential entropy as eps -> 0.
double discretized_shannon(const std::function<double(double)>& pdf, double a, double b, double eps);

/// CSV dump: sample_id,modality,raw,normalized
void write_uncertainty_csv(std::ostream& out, const UncertaintyMatrix& matrix,
                           std::span<const ModalitySpec> modalities);

}  // namespace partal
