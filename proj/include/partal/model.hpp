#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "partal/data.hpp"
#include "partal/numerics.hpp"

namespace partal {

struct NetConfig {
  std::size_t hidden_dim = 128;
  double dropout_rate = 0.1;
  /// Stop gradients from the distillation heads into the stage-1 heads.
  bool detach_stage1 = false;
  /// Learning-loss head (two-layer MLP on detached encoder features).
  bool aux_head = false;
  std::size_t aux_hidden = 32;

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

struct NetGeometry {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t input_channels = 1;
  std::vector<ModalitySpec> modalities;

  static NetGeometry of(const Dataset& dataset);

  std::size_t pixels() const { return height * width; }
  std::size_t input_dim() const { return input_channels * pixels(); }
  /// Width of modality k's per-pixel output, flattened: channels * H * W.
  std::size_t output_dim(std::size_t k) const { return modalities[k].channels * pixels(); }

  friend bool operator==(const NetGeometry&, const NetGeometry&) = default;
};

/// Fully connected two-stage multi-task network. Stage 1: shared encoder
/// (two ReLU layers, dropout after each) and one linear head per modality.
/// Stage 2: one distillation head per modality reading the encoder features
/// concatenated with every modality's stage-1 prediction (softmax
/// probabilities for categorical modalities) or, where injected, its
/// ground truth.
///
/// All parameters live in one flat vector; blocks() describes the layout.
class MultiTaskNet {
 public:
  struct Block {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const { return rows * cols; }
    friend bool operator==(const Block&, const Block&) = default;
  };

  MultiTaskNet(NetGeometry geometry, NetConfig config, SeededRng init_rng);

  const NetGeometry& geometry() const { return geometry_; }
  const NetConfig& config() const { return config_; }
  std::size_t num_modalities() const { return geometry_.modalities.size(); }
  std::size_t distill_input_dim() const;
  /// Row offset of modality k's slot inside the distillation input.
  std::size_t slot_offset(std::size_t k) const;

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::span<const double> block_values(std::size_t index) const;

  // Block indices; the bias block always follows its weight block.
  static constexpr std::size_t kEncoder1 = 0;
  static constexpr std::size_t kEncoder2 = 2;
  std::size_t initial_head_block(std::size_t k) const { return 4 + 2 * k; }
  std::size_t distill_head_block(std::size_t k) const { return 4 + 2 * num_modalities() + 2 * k; }
  /// First aux block (hidden layer); throws if the head is disabled.
  std::size_t aux_block() const;

  /// Reset all parameters from `init_rng`.
  void initialize(SeededRng init_rng);

  friend bool operator==(const MultiTaskNet&, const MultiTaskNet&) = default;

 private:
  void add_block(std::string name, std::size_t rows, std::size_t cols);

  NetGeometry geometry_;
  NetConfig config_;
  std::vector<Block> blocks_;
  std::vector<double> params_;
};

/// Ground truth substituted for stage-1 predictions at the distillation
/// input. Keys are modality indices; values use the target layout.
struct LabelInjection {
  std::map<std::size_t, Tensor> provided;
  bool contains(std::size_t k) const { return provided.count(k) != 0; }
};

/// Per-modality outputs shaped [channels, H, W]; categorical outputs are logits.
struct ForwardResult {
  std::vector<Tensor> stage1;
  std::vector<Tensor> stage2;
};

/// Single-sample forward pass. With dropout_active the masks are drawn from
/// `rng` (first-layer mask, then second-layer mask).
ForwardResult forward(const MultiTaskNet& net, const Tensor& x, const LabelInjection& injection,
                      bool dropout_active, SeededRng& rng);

/// Per-sample flags over modalities (size K).
using ModalityMask = std::vector<std::uint8_t>;

/// Batched predictions, per modality shaped [N, channels, H, W].
struct BatchPrediction {
  std::vector<Tensor> stage1;
  std::vector<Tensor> stage2;
};

/// Forward for many samples. `inject[i][k]` substitutes sample i's own
/// ground truth for modality k (empty span: no injection). A non-empty
/// `dropout_rngs` enables dropout, column i drawing from dropout_rngs[i].
BatchPrediction predict(const MultiTaskNet& net, std::span<const SampleRecord* const> samples,
                        std::span<const ModalityMask> inject, std::span<SeededRng> dropout_rngs);

/// Encoder features with dropout off, shaped [N, hidden].
Tensor encode(const MultiTaskNet& net, std::span<const SampleRecord* const> samples);

struct LossBreakdown {
  double total = 0.0;
  std::vector<double> per_modality;
};

/// Weighted masked loss. Modality k's loss is the mean over samples with
/// label_mask[i][k] of the stage-1 loss plus the mean over samples with
/// stage2_mask[i][k] (defaults to label_mask) of the stage-2 loss.
/// Cross-entropy per pixel for categorical, MSE for continuous.
LossBreakdown masked_loss(std::span<const ModalitySpec> modalities,
                          const std::vector<ForwardResult>& predictions,
                          std::span<const SampleRecord* const> targets,
                          std::span<const ModalityMask> label_mask,
                          std::span<const double> loss_weights,
                          std::span<const ModalityMask> stage2_mask = {});

struct TrainBatch {
  std::vector<const SampleRecord*> samples;
  std::vector<ModalityMask> labelled;
  std::vector<ModalityMask> injected;
};

struct GradientResult {
  LossBreakdown loss;
  std::vector<double> gradient;          // same layout as parameters()
  std::vector<std::uint8_t> touched;     // per block: received a gradient path
  /// Weighted stage-1 loss of each sample's labelled modalities, detached.
  /// Aux-head target; unlike stage 2 it does not depend on teacher forcing.
  std::vector<double> per_sample_loss;
  /// Mean pairwise margin ranking loss of the aux head over the batch.
  double aux_loss = 0.0;
};

/// Loss and analytic gradient for one batch. Injected modalities are
/// inputs, so their stage-2 outputs are not supervised for that sample.
GradientResult loss_and_gradient(const MultiTaskNet& net, const TrainBatch& batch,
                                 std::span<SeededRng> dropout_rngs);
/// Same, reusing the buffers of `out`.
void loss_and_gradient(const MultiTaskNet& net, const TrainBatch& batch, std::span<SeededRng> dropout_rngs,
                       GradientResult& out);

struct TrainConfig {
  int epochs = 60;
  std::size_t batch_size = 32;
  double base_lr = 1e-3;
  double weight_decay = 1e-4;
  double teacher_forcing_p = 0.5;
  bool reinit_each_iteration = false;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainingPool {
  std::vector<const SampleRecord*> samples;
  std::vector<ModalityMask> labelled;

  std::size_t labelled_pairs() const;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> aux_epoch_loss;
};

/// Adam with poly learning-rate decay. Each epoch shuffles with a seeded
/// stream; each labelled (sample, modality) is teacher-forced with
/// probability teacher_forcing_p per batch.
TrainReport train(MultiTaskNet& net, const TrainingPool& pool, const TrainConfig& config);

/// Predicted loss for one input; requires the aux head.
double aux_loss_head_forward(const MultiTaskNet& net, const Tensor& x);
std::vector<double> aux_loss_head_forward(const MultiTaskNet& net,
                                          std::span<const SampleRecord* const> samples);

/// Encode ground truth the way it enters the distillation input:
/// continuous values as-is, categorical maps one-hot.
std::vector<double> encode_injection(const ModalitySpec& spec, const Tensor& target,
                                     std::size_t pixels);

void save_checkpoint(const MultiTaskNet& net, const std::filesystem::path& stem);
MultiTaskNet load_checkpoint(const std::filesystem::path& stem);

}  // namespace partal
