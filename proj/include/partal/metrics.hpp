#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "partal/data.hpp"
#include "partal/numerics.hpp"

namespace partal {

/// sqrt(mean((pred - target)^2)) over all elements.
double rmse(const Tensor& pred, const Tensor& target);

struct AngleErrorResult {
  double degrees = 0.0;
  /// Zero-length predictions replaced by (0, 0, 1).
  std::size_t degenerate_predictions = 0;
};

/// Mean angle in degrees between vector fields shaped [3, M], [3, H, W] or
/// [N, 3, H, W]. Predictions are normalised before the dot product.
AngleErrorResult mean_angle_error(const Tensor& pred, const Tensor& target);

/// Mean IoU over classes present in prediction or target.
double miou(const Tensor& pred_classes, const Tensor& target_classes, std::size_t num_classes);

struct MetricEntry {
  std::string name;
  MetricKind kind = MetricKind::RMSE;
  double value = 0.0;
  bool higher_is_better = false;

  friend bool operator==(const MetricEntry&, const MetricEntry&) = default;
};

struct MetricsReport {
  std::vector<MetricEntry> entries;
  double delta_mtl = 0.0;

  const MetricEntry& at(const std::string& name) const;
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Column name of a modality's metric in result files, e.g. "depth_rmse".
std::string metric_column(const ModalitySpec& spec);

/// (1/K) * sum_k s_k (M_k - M_k^ref) / M_k^ref, s_k = -1 for
/// higher-is-better metrics. Entries are matched by name. Lower is better.
double delta_mtl(const MetricsReport& report, const MetricsReport& reference);

}  // namespace partal
