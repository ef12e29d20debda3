#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "partal/errors.hpp"
#include "partal/numerics.hpp"

namespace partal {

enum class ModalityKind { Categorical, Continuous };
enum class MetricKind { MIoU, RMSE, MeanAngleError };

std::string to_string(ModalityKind kind);
std::string to_string(MetricKind kind);

struct ModalitySpec {
  std::string name;
  ModalityKind kind = ModalityKind::Continuous;
  /// num_classes for categorical, dim for continuous.
  std::size_t channels = 1;
  double loss_weight = 1.0;
  MetricKind metric = MetricKind::RMSE;
  bool higher_is_better = false;

  static ModalitySpec categorical(std::string name, std::size_t num_classes, double loss_weight);
  static ModalitySpec continuous(std::string name, std::size_t dim, double loss_weight,
                                 MetricKind metric);

  bool is_categorical() const { return kind == ModalityKind::Categorical; }
  /// Throws std::invalid_argument when the fields are inconsistent.
  void validate() const;

  friend bool operator==(const ModalitySpec&, const ModalitySpec&) = default;
};

/// One scene. Categorical targets are [H, W] class indices stored as doubles;
/// continuous targets are [dim, H, W].
struct SampleRecord {
  std::int64_t sample_id = 0;
  Tensor input;
  std::vector<Tensor> targets;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t input_channels = 1;
  std::vector<ModalitySpec> modalities;
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> test;
  std::uint64_t generator_seed = 0;

  std::size_t pixels() const { return height * width; }
  std::size_t input_dim() const { return input_channels * height * width; }
  std::size_t num_modalities() const { return modalities.size(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GeneratorConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t num_bumps = 2;
  double noise_std = 0.02;
  std::size_t num_classes = 4;
  std::size_t n_train = 600;
  std::size_t n_test = 200;

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

/// Default modality list: depth (dim 1), normals (dim 3), segmentation.
std::vector<ModalitySpec> default_modalities(std::size_t num_classes);

/// Fixed light direction used for Lambertian shading, (1, 1, 2)/sqrt(6).
std::array<double, 3> light_direction();

Dataset generate_dataset(const GeneratorConfig& config, std::uint64_t seed);

/// Surface normals of a height field. Central differences inside, one-sided
/// at the borders; n = normalize(-dz/dx, -dz/dy, 1). Output is [3, H, W].
Tensor normals_from_depth(const Tensor& depth, double spacing = 1.0);

/// Per-image equal-mass quantile bins of the depth map; ties resolved by
/// pixel index.
Tensor quantile_segmentation(const Tensor& depth, std::size_t num_classes);

enum class DatasetErrorKind { Io, Format, VersionMismatch, Truncated, InvariantViolation };

class DatasetError : public IoError {
 public:
  DatasetError(DatasetErrorKind kind, const std::string& what) : IoError(what), kind_(kind) {}
  DatasetErrorKind kind() const { return kind_; }

 private:
  DatasetErrorKind kind_;
};

inline constexpr int kDatasetFormatVersion = 1;

/// Paths of the manifest/blob pair for a stem like "out/data".
std::filesystem::path manifest_path(const std::filesystem::path& stem);
std::filesystem::path blob_path(const std::filesystem::path& stem);

void save_dataset(const Dataset& dataset, const std::filesystem::path& stem);
Dataset load_dataset(const std::filesystem::path& stem);

/// Throws DatasetError(InvariantViolation) on the first broken record invariant.
void validate_dataset(const Dataset& dataset);

}  // namespace partal
