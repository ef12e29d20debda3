#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "partal/uncertainty.hpp"
#include "support.hpp"

using namespace partal;
using partal::testing::micro_dataset;

namespace {

UncertaintyMatrix matrix_of(std::vector<double> raw, std::size_t K) {
  UncertaintyMatrix m;
  m.num_modalities = K;
  for (std::size_t i = 0; i < raw.size() / K; ++i) m.sample_ids.push_back(static_cast<std::int64_t>(i));
  m.raw = std::move(raw);
  m.candidate.assign(m.raw.size(), 1);
  return m;
}

}  // namespace

TEST_CASE("shannon entropy map") {
  const Tensor uniform({4, 1, 2}, 0.25);
  for (double h : shannon_entropy_map(uniform).data) CHECK(h == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor onehot({3, 1, 1}, {0.0, 1.0, 0.0});
  CHECK(shannon_entropy_map(onehot)[0] == 0.0);

  Tensor p({2, 1, 1}, {0.2, 0.8});
  CHECK(shannon_entropy_map(p)[0] == doctest::Approx(-(0.2 * std::log(0.2) + 0.8 * std::log(0.8))).epsilon(1e-12));

  CHECK_THROWS_AS(shannon_entropy_map(Tensor({2, 1, 1}, {0.5, 0.6})), std::invalid_argument);
  CHECK_THROWS_AS(shannon_entropy_map(Tensor({2, 1, 1}, {-0.1, 1.1})), std::invalid_argument);
}

TEST_CASE("gaussian entropy map") {
  const double c = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  CHECK(gaussian_entropy_map(Tensor({1, 1, 1}, 1.0))[0] == doctest::Approx(c).epsilon(1e-12));
  // Three independent axes add their entropies.
  Tensor v({3, 1, 1}, {0.5, 2.0, 4.0});
  const double expected = 3 * c + 0.5 * (std::log(0.5) + std::log(2.0) + std::log(4.0));
  CHECK(gaussian_entropy_map(v)[0] == doctest::Approx(expected).epsilon(1e-12));
  // Scaling the std by a adds ln a per axis.
  CHECK(gaussian_entropy_map(Tensor({1, 1, 1}, 9.0))[0] - gaussian_entropy_map(Tensor({1, 1, 1}, 1.0))[0] ==
        doctest::Approx(std::log(3.0)).epsilon(1e-12));
  // Zero variance is floored, so the map stays finite.
  const double floored = gaussian_entropy_map(Tensor({1, 1, 1}, 0.0))[0];
  CHECK(floored == doctest::Approx(c + 0.5 * std::log(kVarianceFloor)).epsilon(1e-12));
  CHECK_THROWS_AS(gaussian_entropy_map(Tensor({1, 1, 1}, std::nan(""))), NumericError);
}

TEST_CASE("discretized entropy approaches the differential entropy") {
  const auto pdf = [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); };
  const double h = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  double previous = 1e9;
  for (double eps : {0.1, 0.05, 0.01}) {
    const double gap = discretized_shannon(pdf, -8.0, 8.0, eps) + std::log(eps) - h;
    // Second-order expansion of exact bin masses: gap ~ eps^2 / 24 times the
    // Fisher information, which is 1 for the standard Gaussian.
    CHECK(gap == doctest::Approx(eps * eps / 24.0).epsilon(1e-3));
    CHECK(std::abs(gap) < previous);
    previous = std::abs(gap);
  }
  CHECK(previous < 1e-3);
  CHECK(discretized_shannon(pdf, -8.0, 8.0, 0.005) - discretized_shannon(pdf, -8.0, 8.0, 0.01) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-3));

  const auto uniform = [](double) { return 1.0; };
  CHECK(discretized_shannon(uniform, 0.0, 1.0, 0.1) == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  CHECK_THROWS_AS(discretized_shannon(pdf, -1.0, 1.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(discretized_shannon(pdf, -8.0, 8.0, 0.0), std::invalid_argument);
}

TEST_CASE("normalization fit, apply and freeze") {
  auto m = matrix_of({1.0, 10.0, 3.0, 30.0, 2.0, 20.0}, 2);
  const auto params = fit_normalization(m, 1);
  CHECK(params.u_min == std::vector<double>{1.0, 10.0});
  CHECK(params.u_max == std::vector<double>{3.0, 30.0});
  CHECK(params.frozen_at_iteration == 1);
  const auto n = apply_normalization(m, params);
  CHECK(n == std::vector<double>{0.0, 0.0, 1.0, 1.0, 0.5, 0.5});

  // Non-candidate entries do not contribute to the range.
  m.candidate[2] = 0;
  CHECK(fit_normalization(m, 1).u_max[0] == 2.0);

  // Values outside the frozen range are not clamped.
  auto later = matrix_of({5.0, 0.0}, 2);
  const auto out = apply_normalization(later, params);
  CHECK(out[0] == 2.0);
  CHECK(out[1] == -0.5);

  FrozenNormalization frozen;
  CHECK_FALSE(frozen.frozen());
  CHECK_THROWS_AS(frozen.params(), std::logic_error);
  frozen.fit(matrix_of({1.0, 10.0, 3.0, 30.0}, 2), 1);
  CHECK(frozen.frozen());
  CHECK_THROWS_AS(frozen.fit(m, 2), std::logic_error);
  CHECK(frozen.params().frozen_at_iteration == 1);

  CHECK_THROWS_AS(fit_normalization(matrix_of({1.0, 2.0}, 2), 1), std::invalid_argument);
  CHECK_THROWS_AS(fit_normalization(matrix_of({1.0, 2.0, 1.0, 3.0}, 2), 1), std::invalid_argument);
  CHECK(params.hash() == fit_normalization(matrix_of({1.0, 10.0, 3.0, 30.0, 2.0, 20.0}, 2), 1).hash());
}

TEST_CASE("mc predictions are reproducible and summarise the passes") {
  const auto ds = micro_dataset(4);
  NetConfig cfg;
  cfg.hidden_dim = 8;
  cfg.dropout_rate = 0.3;
  const MultiTaskNet net(NetGeometry::of(ds), cfg, SeededRng(3, 1));

  SeededRng a(9, 2), b(9, 2);
  const auto s1 = mc_predict(net, ds.train[0].input, {}, 5, a);
  const auto s2 = mc_predict(net, ds.train[0].input, {}, 5, b);
  CHECK(s1.passes == 5);
  CHECK(s1.mean == s2.mean);
  CHECK(s1.variance == s2.variance);
  REQUIRE(s1.mean.size() == 2);
  // Depth: mean and floored variance. Segmentation: probabilities only.
  CHECK(s1.mean[0].shape == std::vector<std::size_t>{1, 4, 4});
  CHECK(s1.variance[0].shape == std::vector<std::size_t>{1, 4, 4});
  for (double v : s1.variance[0].data) CHECK(v >= kVarianceFloor);
  CHECK(s1.variance[1].size() == 0);
  for (std::size_t p = 0; p < 16; ++p) {
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) total += s1.mean[1][c * 16 + p];
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
  const auto u = image_uncertainties(s1, ds.modalities);
  CHECK(u.size() == 2);
  CHECK(u[1] > 0.0);
  CHECK(u[1] <= std::log(3.0) + 1e-12);

  SeededRng c(9, 2);
  CHECK_THROWS_AS(mc_predict(net, ds.train[0].input, {}, 1, c), std::invalid_argument);
}

TEST_CASE("batched mc predictions use per-sample streams") {
  const auto ds = micro_dataset(6);
  NetConfig cfg;
  cfg.hidden_dim = 8;
  cfg.dropout_rate = 0.3;
  const MultiTaskNet net(NetGeometry::of(ds), cfg, SeededRng(3, 1));
  std::vector<const SampleRecord*> all;
  for (const auto& r : ds.train) all.push_back(&r);
  const std::vector<ModalityMask> none(all.size(), ModalityMask(2, 0));
  const SeededRng base(4, 4);
  const auto together = mc_predict_many(net, all, none, 4, base);
  REQUIRE(together.size() == 6);
  // The tail group alone draws the same masks, so only float rounding differs.
  const auto tail = mc_predict_many(net, std::span(all).subspan(3), std::span(none).subspan(3), 4, base);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      const auto& x = together[3 + i].mean[k].data;
      const auto& y = tail[i].mean[k].data;
      for (std::size_t j = 0; j < x.size(); ++j) CHECK(x[j] == doctest::Approx(y[j]).epsilon(1e-5));
    }
  }
  CHECK(together[0].mean != together[1].mean);
}

TEST_CASE("uncertainty csv lists every entry") {
  auto m = matrix_of({1.0, 2.0, 3.0, 4.0}, 2);
  m.normalized = {0.0, 0.0, 1.0, 1.0};
  const auto ds = micro_dataset(2);
  std::ostringstream out;
  write_uncertainty_csv(out, m, ds.modalities);
  CHECK(out.str() == "sample_id,modality,raw,normalized\n0,depth,1,0\n0,segmentation,2,0\n1,depth,3,1\n"
                     "1,segmentation,4,1\n");
}
