#include "partal/acquisition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace partal {

namespace {

std::size_t images_for_budget(std::size_t budget, std::size_t num_modalities) {
  if (num_modalities == 0) throw std::invalid_argument("acquisition: K must be >= 1");
  if (budget % num_modalities != 0) {
    throw std::invalid_argument("acquisition: budget " + std::to_string(budget) +
                                " is not divisible by K=" + std::to_string(num_modalities));
  }
  return budget / num_modalities;
}

AcquisitionBatch whole_images(std::vector<std::int64_t> ids, std::size_t num_modalities,
                              bool exhausted) {
  std::sort(ids.begin(), ids.end());
  AcquisitionBatch batch;
  batch.exhausted = exhausted;
  for (auto id : ids) {
    for (std::size_t k = 0; k < num_modalities; ++k) batch.pairs.push_back({id, k});
  }
  return batch;
}

}  // namespace

std::vector<std::size_t> top_indices(std::span<const double> scores, std::size_t n) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  n = std::min(n, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  order.resize(n);
  return order;
}

AcquisitionBatch select_top_pairs(const UncertaintyMatrix& m, std::span<const double> scores,
                                  std::size_t budget) {
  const std::size_t K = m.num_modalities;
  if (scores.size() != m.rows() * K) throw std::invalid_argument("select_top_pairs: score size mismatch");
  struct Entry {
    double score;
    PairId pair;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      if (!m.is_candidate(i, k)) continue;
      const double s = scores[i * K + k];
      if (std::isnan(s)) throw NumericError("select_top_pairs: NaN score");
      entries.push_back({s, {m.sample_ids[i], k}});
    }
  }
  AcquisitionBatch batch;
  batch.exhausted = entries.size() < budget;
  const std::size_t n = std::min(budget, entries.size());
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(n), entries.end(),
                    [](const Entry& a, const Entry& b) {
                      if (a.score != b.score) return a.score > b.score;
                      return a.pair < b.pair;
                    });
  for (std::size_t j = 0; j < n; ++j) batch.pairs.push_back(entries[j].pair);
  return batch;
}

AcquisitionBatch select_partal(const UncertaintyMatrix& m, std::size_t budget) {
  if (m.normalized.size() != m.raw.size()) {
    throw std::logic_error("select_partal: uncertainties are not normalized");
  }
  return select_top_pairs(m, m.normalized, budget);
}

AcquisitionBatch select_random_full(std::span<const std::int64_t> unlabelled_images,
                                    std::size_t budget, std::size_t num_modalities, SeededRng& rng) {
  const std::size_t n = images_for_budget(budget, num_modalities);
  std::vector<std::int64_t> pool(unlabelled_images.begin(), unlabelled_images.end());
  std::sort(pool.begin(), pool.end());
  rng.shuffle(pool);
  const bool exhausted = pool.size() < n;
  pool.resize(std::min(n, pool.size()));
  return whole_images(std::move(pool), num_modalities, exhausted);
}

AcquisitionBatch select_random_partial(std::span<const PairId> candidates, std::size_t budget,
                                       SeededRng& rng) {
  std::vector<PairId> pool(candidates.begin(), candidates.end());
  std::sort(pool.begin(), pool.end());
  rng.shuffle(pool);
  AcquisitionBatch batch;
  batch.exhausted = pool.size() < budget;
  pool.resize(std::min(budget, pool.size()));
  std::sort(pool.begin(), pool.end());
  batch.pairs = std::move(pool);
  return batch;
}

AcquisitionBatch select_rbal(const UncertaintyMatrix& m, std::size_t budget, std::size_t num_modalities) {
  const std::size_t n = images_for_budget(budget, num_modalities);
  const std::size_t K = m.num_modalities;
  if (K != num_modalities) throw std::invalid_argument("select_rbal: K mismatch");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    bool full = true;
    for (std::size_t k = 0; k < K; ++k) full = full && m.is_candidate(i, k);
    if (full) rows.push_back(i);
  }
  std::vector<std::size_t> rank_sum(rows.size(), 0);
  std::vector<std::size_t> order(rows.size());
  for (std::size_t k = 0; k < K; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double ua = m.raw_at(rows[a], k), ub = m.raw_at(rows[b], k);
      if (ua != ub) return ua > ub;
      return m.sample_ids[rows[a]] < m.sample_ids[rows[b]];
    });
    for (std::size_t r = 0; r < order.size(); ++r) rank_sum[order[r]] += r;
  }
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (rank_sum[a] != rank_sum[b]) return rank_sum[a] < rank_sum[b];
    return m.sample_ids[rows[a]] < m.sample_ids[rows[b]];
  });
  std::vector<std::int64_t> chosen;
  for (std::size_t j = 0; j < std::min(n, order.size()); ++j) chosen.push_back(m.sample_ids[rows[order[j]]]);
  return whole_images(std::move(chosen), num_modalities, order.size() < n);
}

namespace {

double squared_distance(const Tensor& f, std::size_t a, std::size_t b) {
  const std::size_t d = f.shape[1];
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double diff = f.data[a * d + j] - f.data[b * d + j];
    s += diff * diff;
  }
  return s;
}

}  // namespace

std::vector<std::size_t> kcenter_greedy(const Tensor& features,
                                        std::span<const std::size_t> initial_centers, std::size_t k) {
  if (features.rank() != 2) throw std::invalid_argument("kcenter_greedy: features must be [N, d]");
  const std::size_t N = features.shape[0];
  std::vector<std::uint8_t> is_center(N, 0);
  for (auto c : initial_centers) {
    if (c >= N) throw std::invalid_argument("kcenter_greedy: center index out of range");
    is_center[c] = 1;
  }
  const auto free_points = static_cast<std::size_t>(std::count(is_center.begin(), is_center.end(), 0));
  if (k > free_points) throw std::invalid_argument("kcenter_greedy: k exceeds the number of non-center points");

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> nearest(N, inf);
  auto absorb = [&](std::size_t c) {
    is_center[c] = 1;
    for (std::size_t i = 0; i < N; ++i) nearest[i] = std::min(nearest[i], squared_distance(features, i, c));
  };
  for (auto c : initial_centers) absorb(c);

  std::vector<std::size_t> picked;
  picked.reserve(k);
  while (picked.size() < k) {
    std::size_t best = N;
    for (std::size_t i = 0; i < N; ++i) {
      if (is_center[i]) continue;
      if (best == N || nearest[i] > nearest[best]) best = i;
    }
    picked.push_back(best);
    absorb(best);
  }
  return picked;
}

double covering_radius(const Tensor& features, std::span<const std::size_t> centers) {
  if (centers.empty()) throw std::invalid_argument("covering_radius: no centers");
  double worst = 0.0;
  for (std::size_t i = 0; i < features.shape[0]; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (auto c : centers) best = std::min(best, squared_distance(features, i, c));
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

AcquisitionBatch select_coreset(const MultiTaskNet& net,
                                std::span<const SampleRecord* const> unlabelled,
                                std::span<const SampleRecord* const> labelled, std::size_t budget,
                                std::size_t num_modalities) {
  const std::size_t n = images_for_budget(budget, num_modalities);
  std::vector<const SampleRecord*> all(labelled.begin(), labelled.end());
  all.insert(all.end(), unlabelled.begin(), unlabelled.end());
  const Tensor features = encode(net, all);
  std::vector<std::size_t> centers(labelled.size());
  std::iota(centers.begin(), centers.end(), 0);
  const bool exhausted = unlabelled.size() < n;
  const auto picked = kcenter_greedy(features, centers, std::min(n, unlabelled.size()));
  std::vector<std::int64_t> ids;
  for (auto idx : picked) ids.push_back(all[idx]->sample_id);
  return whole_images(std::move(ids), num_modalities, exhausted);
}

AcquisitionBatch select_learning_loss(const MultiTaskNet& net,
                                      std::span<const SampleRecord* const> unlabelled,
                                      std::size_t budget, std::size_t num_modalities) {
  const std::size_t n = images_for_budget(budget, num_modalities);
  const auto predicted = aux_loss_head_forward(net, unlabelled);
  std::vector<std::int64_t> ids;
  for (auto idx : top_indices(predicted, n)) ids.push_back(unlabelled[idx]->sample_id);
  return whole_images(std::move(ids), num_modalities, unlabelled.size() < n);
}

}  // namespace partal
