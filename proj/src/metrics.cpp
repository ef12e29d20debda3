#include "partal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace partal {

double rmse(const Tensor& pred, const Tensor& target) {
  if (pred.shape != target.shape) throw std::invalid_argument("rmse: shape mismatch");
  if (pred.size() == 0) throw std::invalid_argument("rmse: empty tensors");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    sum += d * d;
  }
  return std::sqrt(sum / static_cast<double>(pred.size()));
}

AngleErrorResult mean_angle_error(const Tensor& pred, const Tensor& target) {
  if (pred.size() != target.size() || pred.rank() < 2 || target.rank() < 2) {
    throw std::invalid_argument("mean_angle_error: shape mismatch");
  }
  // [3, M] and [3, H, W] carry channels first; [N, 3, H, W] on axis 1.
  const std::size_t axis = pred.rank() == 4 ? 1 : 0;
  if (pred.shape != target.shape) throw std::invalid_argument("mean_angle_error: shape mismatch");
  if (pred.shape[axis] != 3) throw std::invalid_argument("mean_angle_error: need 3 channels");
  std::size_t groups = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) groups *= pred.shape[i];
  for (std::size_t i = axis + 1; i < pred.rank(); ++i) inner *= pred.shape[i];

  AngleErrorResult res;
  double sum = 0.0;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * 3 * inner;
    for (std::size_t m = 0; m < inner; ++m) {
      double p[3], t[3];
      for (int c = 0; c < 3; ++c) {
        p[c] = pred.data[base + static_cast<std::size_t>(c) * inner + m];
        t[c] = target.data[base + static_cast<std::size_t>(c) * inner + m];
      }
      double pn = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
      if (!(pn > 0.0) || !std::isfinite(pn)) {
        p[0] = p[1] = 0.0;
        p[2] = 1.0;
        pn = 1.0;
        ++res.degenerate_predictions;
      }
      const double tn = std::sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);
      const double dot = (p[0] * t[0] + p[1] * t[1] + p[2] * t[2]) / (pn * (tn > 0.0 ? tn : 1.0));
      sum += std::acos(std::clamp(dot, -1.0, 1.0));
    }
  }
  res.degrees = sum / static_cast<double>(groups * inner) * 180.0 / std::numbers::pi;
  return res;
}

double miou(const Tensor& pred_classes, const Tensor& target_classes, std::size_t num_classes) {
  if (pred_classes.size() != target_classes.size()) throw std::invalid_argument("miou: size mismatch");
  std::vector<std::size_t> inter(num_classes, 0), uni(num_classes, 0);
  auto check = [num_classes](double v) {
    if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(num_classes)) {
      throw std::invalid_argument("miou: class value out of range");
    }
    return static_cast<std::size_t>(v);
  };
  for (std::size_t i = 0; i < pred_classes.size(); ++i) {
    const auto p = check(pred_classes.data[i]);
    const auto t = check(target_classes.data[i]);
    if (p == t) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[t];
    }
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (uni[c] == 0) continue;
    sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++present;
  }
  return present == 0 ? 1.0 : sum / static_cast<double>(present);
}

const MetricEntry& MetricsReport::at(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("metrics report has no entry '" + name + "'");
}

std::string metric_column(const ModalitySpec& spec) {
  return spec.name + "_" + to_string(spec.metric);
}

double delta_mtl(const MetricsReport& report, const MetricsReport& reference) {
  if (report.entries.size() != reference.entries.size() || report.entries.empty()) {
    throw std::invalid_argument("delta_mtl: modality lists differ");
  }
  double sum = 0.0;
  for (const auto& ref : reference.entries) {
    const auto& cur = report.at(ref.name);
    if (ref.value == 0.0) throw std::invalid_argument("delta_mtl: zero reference value for " + ref.name);
    const double sign = ref.higher_is_better ? -1.0 : 1.0;
    sum += sign * (cur.value - ref.value) / ref.value;
  }
  return sum / static_cast<double>(reference.entries.size());
}

}  // namespace partal
