#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "partal/acquisition.hpp"
#include "support.hpp"

using namespace partal;
using partal::testing::micro_dataset;

namespace {

UncertaintyMatrix matrix_of(std::vector<std::int64_t> ids, std::vector<double> raw, std::size_t K) {
  UncertaintyMatrix m;
  m.num_modalities = K;
  m.sample_ids = std::move(ids);
  m.raw = std::move(raw);
  m.candidate.assign(m.raw.size(), 1);
  return m;
}

bool whole_images_only(const AcquisitionBatch& b, std::size_t K) {
  std::map<std::int64_t, std::size_t> per;
  for (const auto& p : b.pairs) ++per[p.sample];
  return std::all_of(per.begin(), per.end(), [&](const auto& e) { return e.second == K; });
}

// Optimal k-center radius by enumerating every center set that contains `fixed`.
double brute_force_radius(const Tensor& f, const std::vector<std::size_t>& fixed, std::size_t k) {
  const std::size_t N = f.shape[0];
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < N; ++i) {
    if (std::find(fixed.begin(), fixed.end(), i) == fixed.end()) free.push_back(i);
  }
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::uint8_t> choose(free.size(), 0);
  std::fill(choose.begin(), choose.begin() + static_cast<std::ptrdiff_t>(k), 1);
  std::sort(choose.begin(), choose.end());
  do {
    auto centers = fixed;
    for (std::size_t j = 0; j < free.size(); ++j) {
      if (choose[j]) centers.push_back(free[j]);
    }
    best = std::min(best, covering_radius(f, centers));
  } while (std::next_permutation(choose.begin(), choose.end()));
  return best;
}

}  // namespace

TEST_CASE("top pairs honour candidates, budget and ties") {
  auto m = matrix_of({4, 7, 9}, {0.5, 0.9, 0.9, 0.1, 0.5, 0.3}, 2);
  m.candidate[1] = 0;
  const std::vector<double> scores = m.raw;
  auto b = select_top_pairs(m, scores, 3);
  REQUIRE(b.pairs.size() == 3);
  CHECK(b.pairs[0] == PairId{7, 0});
  // Equal scores: lower sample id first.
  CHECK(b.pairs[1] == PairId{4, 0});
  CHECK(b.pairs[2] == PairId{9, 0});
  CHECK_FALSE(b.exhausted);
  CHECK(b.cost() == 3);

  b = select_top_pairs(m, scores, 10);
  CHECK(b.pairs.size() == 5);
  CHECK(b.exhausted);

  auto bad = scores;
  bad[0] = std::nan("");
  CHECK_THROWS_AS(select_top_pairs(m, bad, 1), NumericError);
  CHECK_THROWS_AS(select_top_pairs(m, std::vector<double>(2), 1), std::invalid_argument);
  CHECK_THROWS_AS(select_partal(m, 1), std::logic_error);
}

TEST_CASE("partal ranks by normalized score, not raw") {
  auto m = matrix_of({0, 1}, {5.0, 0.2, 4.0, 0.1}, 2);
  m.normalized = {0.2, 1.0, 0.0, 0.0};
  const auto b = select_partal(m, 1);
  REQUIRE(b.pairs.size() == 1);
  CHECK(b.pairs[0] == PairId{0, 1});
}

TEST_CASE("random full and partial selection") {
  const std::vector<std::int64_t> images{3, 1, 8, 5, 2};
  SeededRng r1(1, 1), r2(1, 1);
  const auto a = select_random_full(images, 6, 3, r1);
  CHECK(a.pairs == select_random_full(images, 6, 3, r2).pairs);
  CHECK(a.cost() == 6);
  CHECK(whole_images_only(a, 3));
  CHECK(std::is_sorted(a.pairs.begin(), a.pairs.end()));
  // Input order does not matter.
  const std::vector<std::int64_t> shuffled{5, 2, 8, 1, 3};
  SeededRng r3(1, 1);
  CHECK(a.pairs == select_random_full(shuffled, 6, 3, r3).pairs);
  CHECK(select_random_full(images, 30, 3, r1).exhausted);
  CHECK_THROWS_AS(select_random_full(images, 7, 3, r1), std::invalid_argument);

  std::vector<PairId> candidates;
  for (std::int64_t i = 0; i < 10; ++i) candidates.push_back({i, static_cast<std::size_t>(i % 3)});
  SeededRng p1(2, 2), p2(2, 2);
  const auto p = select_random_partial(candidates, 4, p1);
  CHECK(p.pairs == select_random_partial(candidates, 4, p2).pairs);
  CHECK(std::set<PairId>(p.pairs.begin(), p.pairs.end()).size() == 4);
  for (const auto& pair : p.pairs) CHECK(std::find(candidates.begin(), candidates.end(), pair) != candidates.end());
  CHECK(select_random_partial(candidates, 11, p1).exhausted);

  // Every candidate is reachable.
  std::set<PairId> seen;
  for (std::uint64_t s = 0; s < 200; ++s) {
    SeededRng rng(s, 0);
    for (const auto& pair : select_random_partial(candidates, 1, rng).pairs) seen.insert(pair);
  }
  CHECK(seen.size() == candidates.size());
}

TEST_CASE("ranking-based selection sums per-modality ranks") {
  // Ranks (0 = most uncertain) per modality:
  // id 10: 0, 2  -> 2
  // id 11: 1, 0  -> 1
  // id 12: 2, 1  -> 3
  auto m = matrix_of({10, 11, 12, 13}, {0.9, 0.1, 0.5, 0.8, 0.2, 0.4, 9.0, 9.0}, 2);
  // Row 13 has a labelled modality and is not eligible.
  m.candidate[7] = 0;
  const auto b = select_rbal(m, 4, 2);
  CHECK(b.pairs == std::vector<PairId>{{10, 0}, {10, 1}, {11, 0}, {11, 1}});
  CHECK_FALSE(b.exhausted);
  CHECK(select_rbal(m, 8, 2).exhausted);
  CHECK_THROWS_AS(select_rbal(m, 3, 2), std::invalid_argument);
}

TEST_CASE("k-center greedy basics") {
  const Tensor line({5, 1}, {0.0, 1.0, 2.0, 3.0, 10.0});
  // Lowest index first, then farthest points.
  CHECK(kcenter_greedy(line, {}, 3) == std::vector<std::size_t>{0, 4, 3});
  const std::vector<std::size_t> init{4};
  CHECK(kcenter_greedy(line, init, 1) == std::vector<std::size_t>{0});
  CHECK(covering_radius(line, std::vector<std::size_t>{0, 4}) == 3.0);
  CHECK_THROWS_AS(kcenter_greedy(line, init, 5), std::invalid_argument);
  CHECK_THROWS_AS(covering_radius(line, std::vector<std::size_t>{}), std::invalid_argument);
}

TEST_CASE("k-center greedy is within twice the optimum") {
  SeededRng rng(17, 3);
  for (int t = 0; t < 60; ++t) {
    const std::size_t n = 4 + rng.below(9);
    const std::size_t d = 1 + rng.below(3);
    Tensor f({n, d});
    for (auto& v : f.data) v = rng.normal();
    const std::vector<std::size_t> fixed = t % 2 ? std::vector<std::size_t>{rng.below(n)} : std::vector<std::size_t>{};
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(4, n - fixed.size()));
    auto centers = fixed;
    for (auto c : kcenter_greedy(f, fixed, k)) centers.push_back(c);
    CHECK(covering_radius(f, centers) <= 2.0 * brute_force_radius(f, fixed, k) + 1e-12);
  }
}

TEST_CASE("top indices") {
  const std::vector<double> s{0.1, 0.7, 0.7, 0.3};
  CHECK(top_indices(s, 3) == std::vector<std::size_t>{1, 2, 3});
  CHECK(top_indices(s, 9).size() == 4);
}

TEST_CASE("model-based selectors return whole images from the pool") {
  const auto ds = micro_dataset(10);
  NetConfig cfg;
  cfg.hidden_dim = 8;
  cfg.aux_head = true;
  cfg.aux_hidden = 4;
  const MultiTaskNet net(NetGeometry::of(ds), cfg, SeededRng(3, 1));
  std::vector<const SampleRecord*> labelled, unlabelled;
  for (std::size_t i = 0; i < ds.train.size(); ++i) (i < 3 ? labelled : unlabelled).push_back(&ds.train[i]);

  const auto core = select_coreset(net, unlabelled, labelled, 4, 2);
  CHECK(core.cost() == 4);
  CHECK(whole_images_only(core, 2));
  for (const auto& p : core.pairs) CHECK(p.sample >= 3);

  const auto ll = select_learning_loss(net, unlabelled, 6, 2);
  CHECK(ll.cost() == 6);
  CHECK(whole_images_only(ll, 2));
  const auto predicted = aux_loss_head_forward(net, unlabelled);
  const auto top = top_indices(predicted, 3);
  std::set<std::int64_t> expected, got;
  for (auto i : top) expected.insert(unlabelled[i]->sample_id);
  for (const auto& p : ll.pairs) got.insert(p.sample);
  CHECK(expected == got);
  CHECK(select_learning_loss(net, unlabelled, 20, 2).exhausted);
}
