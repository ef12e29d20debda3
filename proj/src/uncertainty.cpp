#include "partal/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>

namespace partal {

namespace {

McSummary summarise(const std::vector<BatchPrediction>& passes, std::size_t sample,
                    const NetGeometry& geo) {
  const std::size_t D = passes.size();
  const std::size_t P = geo.pixels();
  McSummary summary;
  summary.passes = D;
  for (std::size_t k = 0; k < geo.modalities.size(); ++k) {
    const auto& spec = geo.modalities[k];
    const std::size_t width = spec.channels * P;
    const std::vector<std::size_t> shape{spec.channels, geo.height, geo.width};
    Tensor mean(shape);
    if (spec.is_categorical()) {
      std::vector<double> probs(width);
      for (const auto& pass : passes) {
        const double* logits = pass.stage2[k].data.data() + sample * width;
        for (std::size_t p = 0; p < P; ++p) {
          double peak = logits[p];
          for (std::size_t c = 1; c < spec.channels; ++c) peak = std::max(peak, logits[c * P + p]);
          double total = 0.0;
          for (std::size_t c = 0; c < spec.channels; ++c) total += std::exp(logits[c * P + p] - peak);
          for (std::size_t c = 0; c < spec.channels; ++c) {
            mean.data[c * P + p] += std::exp(logits[c * P + p] - peak) / total;
          }
        }
      }
      for (double& v : mean.data) v /= static_cast<double>(D);
      summary.mean.push_back(std::move(mean));
      summary.variance.emplace_back();
      continue;
    }
    Tensor var(shape);
    for (const auto& pass : passes) {
      const double* out = pass.stage2[k].data.data() + sample * width;
      for (std::size_t i = 0; i < width; ++i) mean.data[i] += out[i];
    }
    for (double& v : mean.data) v /= static_cast<double>(D);
    for (const auto& pass : passes) {
      const double* out = pass.stage2[k].data.data() + sample * width;
      for (std::size_t i = 0; i < width; ++i) {
        const double d = out[i] - mean.data[i];
        var.data[i] += d * d;
      }
    }
    for (double& v : var.data) v = std::max(v / static_cast<double>(D - 1), kVarianceFloor);
    summary.mean.push_back(std::move(mean));
    summary.variance.push_back(std::move(var));
  }
  return summary;
}

}  // namespace

std::vector<McSummary> mc_predict_many(const MultiTaskNet& net,
                                       std::span<const SampleRecord* const> samples,
                                       std::span<const ModalityMask> inject, std::size_t passes,
                                       const SeededRng& base) {
  if (passes < 2) throw std::invalid_argument("mc_predict: need at least 2 passes");
  std::vector<SeededRng> rngs;
  rngs.reserve(samples.size());
  for (const auto* s : samples) rngs.push_back(base.split(static_cast<std::uint64_t>(s->sample_id)));
  std::vector<BatchPrediction> outputs;
  outputs.reserve(passes);
  // Each pass advances every sample's own stream, so grouping leaves the masks unchanged.
  for (std::size_t d = 0; d < passes; ++d) {
    outputs.push_back(predict(net, samples, inject, net.config().dropout_rate > 0.0 ? std::span(rngs) : std::span<SeededRng>{}));
  }
  std::vector<McSummary> result;
  result.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) result.push_back(summarise(outputs, i, net.geometry()));
  return result;
}

McSummary mc_predict(const MultiTaskNet& net, const Tensor& x, const LabelInjection& injection,
                     std::size_t passes, SeededRng& rng) {
  if (passes < 2) throw std::invalid_argument("mc_predict: need at least 2 passes");
  const auto& geo = net.geometry();
  std::vector<BatchPrediction> outputs;
  outputs.reserve(passes);
  for (std::size_t d = 0; d < passes; ++d) {
    const auto fr = forward(net, x, injection, true, rng);
    BatchPrediction bp;
    for (std::size_t k = 0; k < fr.stage2.size(); ++k) {
      bp.stage2.push_back(fr.stage2[k]);
    }
    outputs.push_back(std::move(bp));
  }
  return summarise(outputs, 0, geo);
}

Tensor shannon_entropy_map(const Tensor& probabilities) {
  if (probabilities.rank() != 3) throw std::invalid_argument("shannon_entropy_map: expected [C, H, W]");
  const std::size_t C = probabilities.shape[0];
  const std::size_t P = probabilities.shape[1] * probabilities.shape[2];
  Tensor out({probabilities.shape[1], probabilities.shape[2]});
  for (std::size_t p = 0; p < P; ++p) {
    double total = 0.0, h = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double q = probabilities.data[c * P + p];
      if (!(q >= 0.0)) throw std::invalid_argument("shannon_entropy_map: negative or NaN probability");
      total += q;
      if (q > 0.0) h -= q * std::log(q);
    }
    if (std::abs(total - 1.0) > 1e-6) {
      throw std::invalid_argument("shannon_entropy_map: probabilities do not sum to 1");
    }
    out.data[p] = h;
  }
  return out;
}

Tensor gaussian_entropy_map(const Tensor& variance) {
  if (variance.rank() != 3) throw std::invalid_argument("gaussian_entropy_map: expected [dim, H, W]");
  const std::size_t N = variance.shape[0];
  const std::size_t P = variance.shape[1] * variance.shape[2];
  const double half_n = 0.5 * static_cast<double>(N);
  const double constant = half_n * std::log(2.0 * std::numbers::pi) + half_n;
  Tensor out({variance.shape[1], variance.shape[2]});
  for (std::size_t p = 0; p < P; ++p) {
    double log_det = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      const double v = variance.data[j * P + p];
      if (std::isnan(v)) throw NumericError("gaussian_entropy_map: NaN variance");
      log_det += std::log(std::max(v, kVarianceFloor));
    }
    out.data[p] = constant + 0.5 * log_det;
  }
  return out;
}

double image_uncertainty(const Tensor& entropy_map) {
  if (entropy_map.size() == 0) throw std::invalid_argument("image_uncertainty: empty map");
  double sum = 0.0;
  for (double v : entropy_map.data) sum += v;
  return sum / static_cast<double>(entropy_map.size());
}

std::vector<double> image_uncertainties(const McSummary& summary,
                                        std::span<const ModalitySpec> modalities) {
  std::vector<double> out;
  out.reserve(modalities.size());
  for (std::size_t k = 0; k < modalities.size(); ++k) {
    const Tensor map = modalities[k].is_categorical() ? shannon_entropy_map(summary.mean[k])
                                                      : gaussian_entropy_map(summary.variance[k]);
    out.push_back(image_uncertainty(map));
  }
  return out;
}

std::uint64_t NormalizationParams::hash() const {
  std::vector<double> all(u_min);
  all.insert(all.end(), u_max.begin(), u_max.end());
  all.push_back(static_cast<double>(frozen_at_iteration));
  return hash_values(all);
}

NormalizationParams fit_normalization(const UncertaintyMatrix& m, int iteration) {
  if (m.rows() < 2) throw std::invalid_argument("fit_normalization: need at least 2 rows");
  const std::size_t K = m.num_modalities;
  NormalizationParams params;
  params.frozen_at_iteration = iteration;
  params.u_min.assign(K, std::numeric_limits<double>::infinity());
  params.u_max.assign(K, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      if (!m.candidate.empty() && !m.is_candidate(i, k)) continue;
      const double u = m.raw_at(i, k);
      if (!std::isfinite(u)) throw NumericError("fit_normalization: non-finite uncertainty");
      params.u_min[k] = std::min(params.u_min[k], u);
      params.u_max[k] = std::max(params.u_max[k], u);
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (!(params.u_max[k] - params.u_min[k] > 1e-12)) {
      throw std::invalid_argument("fit_normalization: degenerate modality uncertainty (modality " +
                                  std::to_string(k) + ")");
    }
  }
  return params;
}

std::vector<double> apply_normalization(const UncertaintyMatrix& m, const NormalizationParams& params) {
  const std::size_t K = m.num_modalities;
  if (params.u_min.size() != K || params.u_max.size() != K) {
    throw std::invalid_argument("apply_normalization: parameter count mismatch");
  }
  std::vector<double> out(m.raw.size());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      out[i * K + k] = (m.raw_at(i, k) - params.u_min[k]) / (params.u_max[k] - params.u_min[k]);
    }
  }
  return out;
}

const NormalizationParams& FrozenNormalization::fit(const UncertaintyMatrix& matrix, int iteration) {
  if (params_) throw std::logic_error("normalization parameters are frozen; refit refused");
  params_ = fit_normalization(matrix, iteration);
  return *params_;
}

const NormalizationParams& FrozenNormalization::params() const {
  if (!params_) throw std::logic_error("normalization parameters not fitted yet");
  return *params_;
}

double discretized_shannon(const std::function<double(double)>& pdf, double a, double b, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("discretized_shannon: eps must be > 0");
  if (!(b > a)) throw std::invalid_argument("discretized_shannon: empty range");
  const auto bins = static_cast<std::size_t>(std::llround((b - a) / eps));
  std::vector<double> mass(bins);
  double total = 0.0;
  // 5-point Gauss-Legendre nodes and weights on [-1, 1].
  constexpr double kNodes[] = {-0.9061798459386640, -0.5384693101056831, 0.0, 0.5384693101056831,
                               0.9061798459386640};
  constexpr double kWeights[] = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889, 0.4786286704993665,
                                 0.2369268850561891};
  for (std::size_t i = 0; i < bins; ++i) {
    const double mid = a + (static_cast<double>(i) + 0.5) * eps;
    double m = 0.0;
    for (int q = 0; q < 5; ++q) m += kWeights[q] * pdf(mid + 0.5 * eps * kNodes[q]);
    mass[i] = 0.5 * eps * m;
    total += mass[i];
  }
  if (total < 0.999 || total > 1.001) {
    throw std::invalid_argument("discretized_shannon: density mass " + std::to_string(total) +
                                " outside [0.999, 1.001]");
  }
  double h = 0.0;
  for (double p : mass) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

void write_uncertainty_csv(std::ostream& out, const UncertaintyMatrix& m,
                           std::span<const ModalitySpec> modalities) {
  out << "sample_id,modality,raw,normalized\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t k = 0; k < m.num_modalities; ++k) {
      out << m.sample_ids[i] << ',' << modalities[k].name << ',' << m.raw_at(i, k) << ',';
      if (!m.normalized.empty()) out << m.normalized_at(i, k);
      out << '\n';
    }
  }
}

}  // namespace partal
