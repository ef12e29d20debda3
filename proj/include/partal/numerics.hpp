#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "partal/errors.hpp"

namespace partal {

/// Dense row-major float64 array.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0);
  Tensor(std::vector<std::size_t> dims, std::vector<double> values);

  static std::size_t element_count(std::span<const std::size_t> dims);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // 2-D accessors; callers guarantee rank() == 2.
  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool all_finite() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Splittable counter-based generator. Output depends only on
/// (seed, stream_id, number of draws so far), never on the platform's
/// standard-library distributions.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0, std::uint64_t stream_id = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  /// Child stream keyed by `id`. Depends only on this stream's identity,
  /// not on how many values have been drawn from it.
  SeededRng split(std::uint64_t id) const;

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

/// FNV-1a over the raw bytes of the values.
std::uint64_t hash_values(std::span<const double> values);

/// Softmax along the last axis with max subtraction.
Tensor softmax(const Tensor& logits);

/// In-place softmax of one contiguous group.
void softmax_inplace(std::span<double> logits);

/// Inverted-dropout mask: 0 with probability `rate`, else 1/(1-rate).
Tensor dropout_mask(SeededRng& rng, const std::vector<std::size_t>& shape, double rate);

template <typename T>
struct BasicAdamState {
  std::vector<T> first_moment;
  std::vector<T> second_moment;
  std::int64_t step_count = 0;
  double base_lr = 1e-3;
  double weight_decay = 0.0;
};
using AdamState = BasicAdamState<double>;

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

/// One Adam update with decoupled weight decay applied before the moment step.
/// Moments are lazily sized on the first call.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr);
void adam_step(std::span<float> params, std::span<const float> grads, BasicAdamState<float>& state,
               double lr);
void adam_step(Tensor& params, const Tensor& grads, AdamState& state, double lr);

/// base_lr * (1 - epoch/total_epochs)^0.9
double poly_lr(double base_lr, int epoch, int total_epochs);

}  // namespace partal
