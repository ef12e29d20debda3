#pragma once

// Fixtures shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "partal/data.hpp"
#include "partal/model.hpp"
#include "partal/numerics.hpp"

namespace partal::testing {

/// 4x4 scenes with two modalities: depth and 3-class segmentation.
inline Dataset micro_dataset(std::size_t n = 6, std::uint64_t seed = 1) {
  GeneratorConfig cfg;
  cfg.height = 4;
  cfg.width = 4;
  cfg.num_classes = 3;
  cfg.n_train = n;
  cfg.n_test = 2;
  Dataset ds = generate_dataset(cfg, seed);
  ds.modalities = {ds.modalities[0], ds.modalities[2]};
  for (auto* split : {&ds.train, &ds.test}) {
    for (auto& rec : *split) rec.targets = {rec.targets[0], rec.targets[2]};
  }
  return ds;
}

struct GradientCheck {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst_relative = 0.0;
};

/// Central finite differences against loss_and_gradient over every
/// parameter. Aux-head parameters are checked against the aux loss, all
/// others against the task loss (the aux target and its input features
/// are detached from the task parameters).
inline GradientCheck finite_difference_check(MultiTaskNet& net, const TrainBatch& batch,
                                             const std::vector<SeededRng>& rngs, double step = 1e-5,
                                             double tolerance = 1e-4) {
  std::size_t aux_begin = net.parameters().size();
  if (net.config().aux_head) aux_begin = net.blocks()[net.aux_block()].offset;
  auto evaluate = [&] {
    auto local = rngs;
    return loss_and_gradient(net, batch, local);
  };
  const auto analytic = evaluate().gradient;
  GradientCheck out;
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto objective = [&] {
      const auto r = evaluate();
      return i >= aux_begin ? r.aux_loss : r.loss.total;
    };
    const double saved = params[i];
    params[i] = saved + step;
    const double up = objective();
    params[i] = saved - step;
    const double down = objective();
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double scale = std::max(std::abs(numeric), std::abs(analytic[i]));
    // Entries that are zero up to FD round-off count as matching.
    const double rel = scale < 1e-7 ? 0.0 : std::abs(numeric - analytic[i]) / scale;
    out.worst_relative = std::max(out.worst_relative, rel);
    out.failures += rel >= tolerance;
    ++out.checked;
  }
  return out;
}

/// A batch over every training sample with a mix of labelled, unlabelled
/// and injected pairs, so that every gradient path is exercised.
inline TrainBatch mixed_batch(const Dataset& ds) {
  TrainBatch batch;
  const std::size_t K = ds.num_modalities();
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    batch.samples.push_back(&ds.train[i]);
    ModalityMask labelled(K, 1), injected(K, 0);
    if (i % 3 == 1) labelled[0] = 0;
    if (i % 3 == 2) labelled[K - 1] = 0;
    if (i % 4 == 0 && labelled[0]) injected[0] = 1;
    if (i % 4 == 3 && labelled[K - 1]) injected[K - 1] = 1;
    batch.labelled.push_back(labelled);
    batch.injected.push_back(injected);
  }
  return batch;
}

}  // namespace partal::testing
