#include "partal/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>

namespace partal {

Tensor::Tensor(std::vector<std::size_t> dims, double fill)
    : shape(std::move(dims)), data(element_count(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> values)
    : shape(std::move(dims)), data(std::move(values)) {
  if (element_count(shape) != data.size()) {
    throw std::invalid_argument("tensor: shape does not match data length");
  }
}

std::size_t Tensor::element_count(std::span<const std::size_t> dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_(stream_id), key_(mix64(mix64(seed) ^ (stream_id * 0xd1b54a32d192ed03ULL))) {}

std::uint64_t SeededRng::next_u64() {
  // Two rounds so that adjacent counters under one key decorrelate fully.
  return mix64(mix64(key_ + counter_++ * 0x9e3779b97f4a7c15ULL) ^ key_);
}

double SeededRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double SeededRng::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t SeededRng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("SeededRng::below: n must be positive");
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  for (;;) {
    const auto v = next_u64();
    if (v < limit) return v % n;
  }
}

SeededRng SeededRng::split(std::uint64_t id) const {
  return SeededRng(seed_, mix64(stream_ ^ mix64(id ^ 0x632be59bd9b4e019ULL)));
}

std::uint64_t hash_values(std::span<const double> values) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (auto b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void softmax_inplace(std::span<double> logits) {
  if (logits.empty()) return;
  double peak = logits[0];
  for (double v : logits) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
    peak = std::max(peak, v);
  }
  double total = 0.0;
  for (double& v : logits) {
    v = std::exp(v - peak);
    total += v;
  }
  for (double& v : logits) v /= total;
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() == 0) throw std::invalid_argument("softmax: rank-0 tensor");
  Tensor out = logits;
  const std::size_t width = logits.shape.back();
  if (width == 0) return out;
  for (std::size_t off = 0; off < out.size(); off += width) {
    softmax_inplace(std::span<double>(out.data).subspan(off, width));
  }
  return out;
}

Tensor dropout_mask(SeededRng& rng, const std::vector<std::size_t>& shape, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout_mask: rate must lie in [0, 1)");
  }
  Tensor mask(shape, 1.0);
  if (rate == 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask.data) m = rng.uniform() < rate ? 0.0 : keep_scale;
  return mask;
}

namespace {

template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, BasicAdamState<T>& state, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: shape mismatch");
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: lr must be positive");
  if (state.first_moment.empty() && !params.empty()) {
    state.first_moment.assign(params.size(), T(0));
    state.second_moment.assign(params.size(), T(0));
  }
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state does not match parameter shape");
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(kAdamBeta1, t);
  const double c2 = 1.0 - std::pow(kAdamBeta2, t);
  const T keep = static_cast<T>(1.0 - lr * state.weight_decay);
  const T step = static_cast<T>(lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T b1 = static_cast<T>(kAdamBeta1), b2 = static_cast<T>(kAdamBeta2);
  const T eps = static_cast<T>(kAdamEpsilon);
  T* __restrict p = params.data();
  const T* __restrict g = grads.data();
  T* __restrict m = state.first_moment.data();
  T* __restrict v = state.second_moment.data();
  const std::size_t n = params.size();
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    p[i] = keep * p[i] - step * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps);
  }
}

}  // namespace

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr) {
  adam_update(params, grads, state, lr);
}

void adam_step(std::span<float> params, std::span<const float> grads, BasicAdamState<float>& state,
               double lr) {
  adam_update(params, grads, state, lr);
}

void adam_step(Tensor& params, const Tensor& grads, AdamState& state, double lr) {
  if (params.shape != grads.shape) throw std::invalid_argument("adam_step: shape mismatch");
  adam_step(std::span<double>(params.data), std::span<const double>(grads.data), state, lr);
}

double poly_lr(double base_lr, int epoch, int total_epochs) {
  if (total_epochs <= 0 || epoch < 0 || epoch >= total_epochs) {
    throw std::invalid_argument("poly_lr: epoch must lie in [0, total_epochs)");
  }
  return base_lr * std::pow(1.0 - static_cast<double>(epoch) / total_epochs, 0.9);
}

}  // namespace partal
