#include "partal/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "container.hpp"

namespace partal {

namespace {

template <typename T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Eigen picks its vectorized paths from the runtime alignment of mapped
/// data, so heap buffers that Eigen reads are over-aligned to keep results
/// bit-identical from run to run.
template <typename T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

constexpr std::size_t kChunk = 64;
constexpr double kAuxMargin = 1.0;

/// Parameter values of `net` in scalar type T. Training and inference run in
/// single precision on a converted copy; double is kept for verification.
template <typename T>
struct Params {
  const MultiTaskNet& net;
  const T* data;

  Eigen::Map<const MatT<T>> block(std::size_t index) const {
    const auto& b = net.blocks()[index];
    return {data + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
  }
  Eigen::Map<const VecT<T>> bias(std::size_t index) const {
    const auto& b = net.blocks()[index];
    return {data + b.offset, static_cast<Eigen::Index>(b.rows)};
  }
};

/// Aligned parameter copy in scalar type T.
template <typename T>
struct ParamSnapshot {
  AlignedVec<T> storage;
  Params<T> view;

  explicit ParamSnapshot(const MultiTaskNet& net)
      : storage(net.parameters().begin(), net.parameters().end()), view{net, storage.data()} {}
};

template <typename T>
Eigen::Map<MatT<T>> grad_block(AlignedVec<T>& storage, const MultiTaskNet& net, std::size_t index) {
  const auto& b = net.blocks()[index];
  return {storage.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
}

template <typename T>
void fill_dropout(SeededRng& rng, double rate, T* out, std::size_t n) {
  if (rate == 0.0) {
    std::fill(out, out + n, T(1));
    return;
  }
  const auto scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < n; ++i) out[i] = rng.uniform() < rate ? T(0) : scale;
}

/// Softmax over channels at every pixel of a [C, P] channel-major column.
template <typename T>
void softmax_pixels(const T* logits, T* probs, std::size_t classes, std::size_t pixels) {
  for (std::size_t p = 0; p < pixels; ++p) {
    T peak = logits[p];
    for (std::size_t c = 1; c < classes; ++c) peak = std::max(peak, logits[c * pixels + p]);
    T total = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const T e = std::exp(logits[c * pixels + p] - peak);
      probs[c * pixels + p] = e;
      total += e;
    }
    for (std::size_t c = 0; c < classes; ++c) probs[c * pixels + p] /= total;
  }
}

double softplus(double z) { return z > 30.0 ? z : std::log1p(std::exp(z)); }
double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

template <typename T>
struct Activations {
  MatT<T> x, a1, m1, h1, a2, m2, f, c;
  std::vector<MatT<T>> o1, o2;
};

template <typename T>
MatT<T> gather_inputs(const MultiTaskNet& net, std::span<const SampleRecord* const> samples) {
  const auto dim = net.geometry().input_dim();
  MatT<T> x(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(samples.size()));
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& in = samples[b]->input;
    if (in.size() != dim) throw std::invalid_argument("input does not match network geometry");
    std::copy(in.data.begin(), in.data.end(), x.col(static_cast<Eigen::Index>(b)).data());
  }
  return x;
}

template <typename T>
void encoder_forward(const Params<T>& P, Activations<T>& act, std::span<SeededRng> rngs) {
  const auto& net = P.net;
  const auto batch = act.x.cols();
  const auto hidden = static_cast<Eigen::Index>(net.config().hidden_dim);
  act.a1.noalias() = P.block(MultiTaskNet::kEncoder1) * act.x;
  act.a1.colwise() += P.bias(MultiTaskNet::kEncoder1 + 1);
  act.h1 = act.a1.cwiseMax(T(0));
  const bool dropout = !rngs.empty();
  if (dropout) {
    act.m1.resize(hidden, batch);
    act.m2.resize(hidden, batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      auto& rng = rngs[static_cast<std::size_t>(b)];
      fill_dropout(rng, net.config().dropout_rate, act.m1.col(b).data(), static_cast<std::size_t>(hidden));
      fill_dropout(rng, net.config().dropout_rate, act.m2.col(b).data(), static_cast<std::size_t>(hidden));
    }
    act.h1 = act.h1.cwiseProduct(act.m1);
  }
  act.a2.noalias() = P.block(MultiTaskNet::kEncoder2) * act.h1;
  act.a2.colwise() += P.bias(MultiTaskNet::kEncoder2 + 1);
  act.f = act.a2.cwiseMax(T(0));
  if (dropout) act.f = act.f.cwiseProduct(act.m2);
}

// Indices of the set entries of `flags`.
std::vector<Eigen::Index> selected_columns(const std::vector<std::uint8_t>& flags) {
  std::vector<Eigen::Index> cols;
  for (std::size_t b = 0; b < flags.size(); ++b) {
    if (flags[b]) cols.push_back(static_cast<Eigen::Index>(b));
  }
  return cols;
}

/// `stage2_cols[k]`, when given, limits head k's distillation output to the
/// flagged columns; the others stay zero.
template <typename T>
Activations<T> run_forward(const Params<T>& P, std::span<const SampleRecord* const> samples,
                           std::span<const ModalityMask> inject, std::span<SeededRng> rngs,
                           const std::vector<std::vector<std::uint8_t>>* stage2_cols = nullptr) {
  const auto& net = P.net;
  const auto& geo = net.geometry();
  const std::size_t K = net.num_modalities();
  const std::size_t pixels = geo.pixels();
  Activations<T> act;
  act.x = gather_inputs<T>(net, samples);
  const auto batch = act.x.cols();
  if (!rngs.empty() && rngs.size() != samples.size()) {
    throw std::invalid_argument("predict: one dropout stream per sample required");
  }
  if (!inject.empty() && inject.size() != samples.size()) {
    throw std::invalid_argument("predict: one injection mask per sample required");
  }
  encoder_forward(P, act, rngs);

  act.c.resize(static_cast<Eigen::Index>(net.distill_input_dim()), batch);
  act.c.topRows(act.f.rows()) = act.f;
  act.o1.resize(K);
  act.o2.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    const auto& spec = geo.modalities[k];
    const auto rows = static_cast<Eigen::Index>(geo.output_dim(k));
    const auto wb = net.initial_head_block(k);
    act.o1[k].noalias() = P.block(wb) * act.f;
    act.o1[k].colwise() += P.bias(wb + 1);
    auto slot = act.c.middleRows(static_cast<Eigen::Index>(net.slot_offset(k)), rows);
    for (Eigen::Index b = 0; b < batch; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      const bool use_truth = !inject.empty() && inject[bi].size() > k && inject[bi][k] != 0;
      if (use_truth) {
        const auto encoded = encode_injection(spec, samples[bi]->targets.at(k), pixels);
        std::copy(encoded.begin(), encoded.end(), slot.col(b).data());
      } else if (spec.is_categorical()) {
        softmax_pixels(act.o1[k].col(b).data(), slot.col(b).data(), spec.channels, pixels);
      } else {
        slot.col(b) = act.o1[k].col(b);
      }
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    const auto wb = net.distill_head_block(k);
    const auto cols = stage2_cols ? selected_columns((*stage2_cols)[k]) : std::vector<Eigen::Index>{};
    if (!stage2_cols || cols.size() == static_cast<std::size_t>(batch)) {
      act.o2[k].noalias() = P.block(wb) * act.c;
      act.o2[k].colwise() += P.bias(wb + 1);
      continue;
    }
    act.o2[k] = MatT<T>::Zero(static_cast<Eigen::Index>(geo.output_dim(k)), batch);
    if (cols.empty()) continue;
    const MatT<T> sub = P.block(wb) * act.c(Eigen::all, cols);
    act.o2[k](Eigen::all, cols) = sub.colwise() + P.bias(wb + 1);
  }
  return act;
}

/// Loss of one sample's output against its target; accumulates
/// scale * dLoss/dOutput into `grad` when non-null.
template <typename T>
double sample_loss(const ModalitySpec& spec, const T* out, const Tensor& target, std::size_t pixels, T* grad,
                   double scale) {
  if (spec.is_categorical()) {
    const std::size_t C = spec.channels;
    double loss = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) {
      const double y = target.data[p];
      if (!std::isfinite(y)) return std::numeric_limits<double>::quiet_NaN();
      const auto cls = static_cast<std::size_t>(y);
      double peak = out[p];
      for (std::size_t c = 1; c < C; ++c) peak = std::max(peak, static_cast<double>(out[c * pixels + p]));
      double total = 0.0;
      for (std::size_t c = 0; c < C; ++c) total += std::exp(out[c * pixels + p] - peak);
      const double lse = peak + std::log(total);
      loss += lse - out[cls * pixels + p];
      if (grad != nullptr) {
        for (std::size_t c = 0; c < C; ++c) {
          const double prob = std::exp(out[c * pixels + p] - lse);
          grad[c * pixels + p] +=
              static_cast<T>(scale * (prob - (c == cls ? 1.0 : 0.0)) / static_cast<double>(pixels));
        }
      }
    }
    return loss / static_cast<double>(pixels);
  }
  const std::size_t n = spec.channels * pixels;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = out[i] - target.data[i];
    loss += d * d;
    if (grad != nullptr) grad[i] += static_cast<T>(scale * 2.0 * d / static_cast<double>(n));
  }
  return loss / static_cast<double>(n);
}

template <typename T>
Tensor stack_outputs(const std::vector<MatT<T>>& chunks, std::size_t n, std::size_t channels,
                     const NetGeometry& geo) {
  Tensor out({n, channels, geo.height, geo.width});
  std::size_t off = 0;
  for (const auto& m : chunks) {
    std::copy(m.data(), m.data() + m.size(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += static_cast<std::size_t>(m.size());
  }
  return out;
}

template <typename T>
VecT<T> aux_forward(const Params<T>& P, const MatT<T>& features, MatT<T>* hidden_out, VecT<T>* pre_out) {
  const auto hb = P.net.aux_block();
  MatT<T> hidden = P.block(hb) * features;
  hidden.colwise() += P.bias(hb + 1);
  hidden = hidden.cwiseMax(T(0));
  VecT<T> pre = (P.block(hb + 2) * hidden).row(0).transpose();
  pre.array() += P.data[P.net.blocks()[hb + 3].offset];
  VecT<T> out = pre.unaryExpr([](T z) { return static_cast<T>(softplus(z)); });
  if (hidden_out != nullptr) *hidden_out = std::move(hidden);
  if (pre_out != nullptr) *pre_out = std::move(pre);
  return out;
}

template <typename T>
struct Gradient {
  LossBreakdown loss;
  AlignedVec<T> gradient;
  std::vector<std::uint8_t> touched;
  std::vector<double> per_sample_loss;
  double aux_loss = 0.0;
};

template <typename T>
void backward(const Params<T>& P, const TrainBatch& batch, std::span<SeededRng> dropout_rngs, Gradient<T>& res) {
  const auto& net = P.net;
  const auto& geo = net.geometry();
  const std::size_t K = net.num_modalities();
  const std::size_t pixels = geo.pixels();
  const std::size_t B = batch.samples.size();
  if (batch.labelled.size() != B || (!batch.injected.empty() && batch.injected.size() != B)) {
    throw std::invalid_argument("loss_and_gradient: mask sizes do not match batch");
  }
  // Only labelled modalities may be injected.
  std::vector<ModalityMask> inject = batch.injected;
  if (inject.empty()) inject.assign(B, ModalityMask(K, 0));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      if (inject[b][k] && !batch.labelled[b][k]) {
        throw std::invalid_argument("loss_and_gradient: cannot inject an unlabelled modality");
      }
    }
  }
  // Stage-2 outputs are supervised where labelled and not injected.
  std::vector<std::vector<std::uint8_t>> supervised2(K, std::vector<std::uint8_t>(B, 0));
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t b = 0; b < B; ++b) supervised2[k][b] = batch.labelled[b][k] && !inject[b][k];
  }
  auto act = run_forward(P, batch.samples, inject, dropout_rngs, &supervised2);

  res.loss = LossBreakdown{};
  res.aux_loss = 0.0;
  res.loss.per_modality.assign(K, 0.0);
  res.per_sample_loss.assign(B, 0.0);
  // Every touched block is assigned exactly once; the rest is left stale.
  res.gradient.resize(net.parameters().size());
  res.touched.assign(net.blocks().size(), 0);

  std::vector<MatT<T>> d_o1(K), d_o2(K);
  std::vector<std::uint8_t> active1(K, 0), active2(K, 0);
  bool any = false;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& spec = geo.modalities[k];
    const double w = spec.loss_weight;
    std::size_t n1 = 0, n2 = 0;
    for (std::size_t b = 0; b < B; ++b) {
      if (batch.labelled[b][k]) {
        ++n1;
        if (!inject[b][k]) ++n2;
      }
    }
    if (n1 == 0) continue;
    any = true;
    active1[k] = 1;
    active2[k] = n2 > 0;
    d_o1[k] = MatT<T>::Zero(act.o1[k].rows(), act.o1[k].cols());
    if (n2 > 0) d_o2[k] = MatT<T>::Zero(act.o2[k].rows(), act.o2[k].cols());
    for (std::size_t b = 0; b < B; ++b) {
      if (!batch.labelled[b][k]) continue;
      const auto col = static_cast<Eigen::Index>(b);
      const auto& target = batch.samples[b]->targets.at(k);
      const double l1 = sample_loss(spec, act.o1[k].col(col).data(), target, pixels, d_o1[k].col(col).data(),
                                    w / static_cast<double>(n1));
      res.loss.per_modality[k] += l1 / static_cast<double>(n1);
      res.per_sample_loss[b] += w * l1;
      if (!inject[b][k]) {
        const double l2 = sample_loss(spec, act.o2[k].col(col).data(), target, pixels, d_o2[k].col(col).data(),
                                      w / static_cast<double>(n2));
        res.loss.per_modality[k] += l2 / static_cast<double>(n2);
      }
    }
    res.loss.total += w * res.loss.per_modality[k];
  }
  if (!any) throw std::invalid_argument("loss_and_gradient: nothing to train on (mask is all zero)");

  // Distillation heads, restricted to their supervised columns.
  MatT<T> d_c = MatT<T>::Zero(act.c.rows(), act.c.cols());
  bool any_distill = false;
  for (std::size_t k = 0; k < K; ++k) {
    if (!active2[k]) continue;
    any_distill = true;
    const auto wb = net.distill_head_block(k);
    const auto cols = selected_columns(supervised2[k]);
    const MatT<T> d_sub = d_o2[k](Eigen::all, cols);
    grad_block(res.gradient, net, wb).noalias() = d_sub * act.c(Eigen::all, cols).transpose();
    grad_block(res.gradient, net, wb + 1).noalias() = d_sub.rowwise().sum();
    d_c(Eigen::all, cols) += P.block(wb).transpose() * d_sub;
    res.touched[wb] = res.touched[wb + 1] = 1;
  }

  // Stage-1 heads, including gradient arriving through the distillation input.
  const auto hidden = static_cast<Eigen::Index>(net.config().hidden_dim);
  MatT<T> d_f = any_distill ? MatT<T>(d_c.topRows(hidden)) : MatT<T>::Zero(hidden, static_cast<Eigen::Index>(B));
  for (std::size_t k = 0; k < K; ++k) {
    const auto& spec = geo.modalities[k];
    bool flows = false;
    if (any_distill && !net.config().detach_stage1) {
      const auto rows = static_cast<Eigen::Index>(geo.output_dim(k));
      auto d_slot = d_c.middleRows(static_cast<Eigen::Index>(net.slot_offset(k)), rows);
      if (d_o1[k].size() == 0) d_o1[k] = MatT<T>::Zero(rows, static_cast<Eigen::Index>(B));
      for (std::size_t b = 0; b < B; ++b) {
        if (inject[b][k]) continue;
        flows = true;
        const auto col = static_cast<Eigen::Index>(b);
        if (spec.is_categorical()) {
          // Softmax Jacobian per pixel: dz_c = p_c (g_c - sum_j p_j g_j).
          const T* prob = act.c.col(col).data() + net.slot_offset(k);
          const T* g = d_slot.col(col).data();
          T* dz = d_o1[k].col(col).data();
          const std::size_t C = spec.channels;
          for (std::size_t p = 0; p < pixels; ++p) {
            T dot = 0;
            for (std::size_t c = 0; c < C; ++c) dot += prob[c * pixels + p] * g[c * pixels + p];
            for (std::size_t c = 0; c < C; ++c) dz[c * pixels + p] += prob[c * pixels + p] * (g[c * pixels + p] - dot);
          }
        } else {
          d_o1[k].col(col) += d_slot.col(col);
        }
      }
    }
    if (!active1[k] && !flows) continue;
    const auto wb = net.initial_head_block(k);
    grad_block(res.gradient, net, wb).noalias() = d_o1[k] * act.f.transpose();
    grad_block(res.gradient, net, wb + 1).noalias() = d_o1[k].rowwise().sum();
    d_f.noalias() += P.block(wb).transpose() * d_o1[k];
    res.touched[wb] = res.touched[wb + 1] = 1;
  }

  // Encoder.
  MatT<T> d_a2 = d_f;
  if (act.m2.size() != 0) d_a2 = d_a2.cwiseProduct(act.m2);
  d_a2 = d_a2.cwiseProduct((act.a2.array() > T(0)).template cast<T>().matrix());
  grad_block(res.gradient, net, MultiTaskNet::kEncoder2).noalias() = d_a2 * act.h1.transpose();
  grad_block(res.gradient, net, MultiTaskNet::kEncoder2 + 1).noalias() = d_a2.rowwise().sum();
  MatT<T> d_a1 = P.block(MultiTaskNet::kEncoder2).transpose() * d_a2;
  if (act.m1.size() != 0) d_a1 = d_a1.cwiseProduct(act.m1);
  d_a1 = d_a1.cwiseProduct((act.a1.array() > T(0)).template cast<T>().matrix());
  grad_block(res.gradient, net, MultiTaskNet::kEncoder1).noalias() = d_a1 * act.x.transpose();
  grad_block(res.gradient, net, MultiTaskNet::kEncoder1 + 1).noalias() = d_a1.rowwise().sum();
  for (std::size_t i = 0; i < 4; ++i) res.touched[i] = 1;

  if (net.config().aux_head) {
    // Features are detached: the aux head never sends gradient into the encoder.
    MatT<T> hidden_act;
    VecT<T> pre;
    const VecT<T> pred = aux_forward(P, act.f, &hidden_act, &pre);
    const auto hb = net.aux_block();
    // Pairwise margin ranking loss on the detached per-sample losses.
    std::vector<double> d(B, 0.0);
    double aux = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < B; ++i) {
      for (std::size_t j = i + 1; j < B; ++j) {
        const double gap = res.per_sample_loss[i] - res.per_sample_loss[j];
        if (gap == 0.0) continue;
        ++pairs;
        const double sign = gap > 0.0 ? 1.0 : -1.0;
        const double hinge =
            kAuxMargin - sign * (static_cast<double>(pred(static_cast<Eigen::Index>(i))) -
                                 static_cast<double>(pred(static_cast<Eigen::Index>(j))));
        if (hinge <= 0.0) continue;
        aux += hinge;
        d[i] -= sign;
        d[j] += sign;
      }
    }
    const double scale = pairs > 0 ? 1.0 / static_cast<double>(pairs) : 0.0;
    res.aux_loss = aux * scale;
    VecT<T> d_pred(static_cast<Eigen::Index>(B));
    for (std::size_t b = 0; b < B; ++b) {
      const auto i = static_cast<Eigen::Index>(b);
      d_pred(i) = static_cast<T>(d[b] * scale * sigmoid(pre(i)));
    }
    const MatT<T> d_pre = d_pred.transpose();
    grad_block(res.gradient, net, hb + 2).noalias() = d_pre * hidden_act.transpose();
    res.gradient[net.blocks()[hb + 3].offset] = d_pred.sum();
    MatT<T> d_hidden = P.block(hb + 2).transpose() * d_pre;
    d_hidden = d_hidden.cwiseProduct((hidden_act.array() > T(0)).template cast<T>().matrix());
    grad_block(res.gradient, net, hb).noalias() = d_hidden * act.f.transpose();
    grad_block(res.gradient, net, hb + 1).noalias() = d_hidden.rowwise().sum();
    for (std::size_t i = hb; i < hb + 4; ++i) res.touched[i] = 1;
  }
}

}  // namespace

NetGeometry NetGeometry::of(const Dataset& ds) {
  return NetGeometry{ds.height, ds.width, ds.input_channels, ds.modalities};
}

MultiTaskNet::MultiTaskNet(NetGeometry geometry, NetConfig config, SeededRng init_rng)
    : geometry_(std::move(geometry)), config_(config) {
  if (geometry_.pixels() == 0 || geometry_.input_channels == 0) {
    throw std::invalid_argument("MultiTaskNet: empty geometry");
  }
  if (geometry_.modalities.empty()) throw std::invalid_argument("MultiTaskNet: no modalities");
  for (const auto& m : geometry_.modalities) m.validate();
  if (config_.hidden_dim == 0) throw std::invalid_argument("MultiTaskNet: hidden_dim must be >= 1");
  if (!(config_.dropout_rate >= 0.0 && config_.dropout_rate < 1.0)) {
    throw std::invalid_argument("MultiTaskNet: dropout_rate must lie in [0, 1)");
  }
  const std::size_t hidden = config_.hidden_dim;
  add_block("encoder1.weight", hidden, geometry_.input_dim());
  add_block("encoder1.bias", hidden, 1);
  add_block("encoder2.weight", hidden, hidden);
  add_block("encoder2.bias", hidden, 1);
  for (const auto& m : geometry_.modalities) {
    const auto out = m.channels * geometry_.pixels();
    add_block("initial." + m.name + ".weight", out, hidden);
    add_block("initial." + m.name + ".bias", out, 1);
  }
  for (const auto& m : geometry_.modalities) {
    const auto out = m.channels * geometry_.pixels();
    add_block("distill." + m.name + ".weight", out, distill_input_dim());
    add_block("distill." + m.name + ".bias", out, 1);
  }
  if (config_.aux_head) {
    if (config_.aux_hidden == 0) throw std::invalid_argument("MultiTaskNet: aux_hidden must be >= 1");
    add_block("aux.hidden.weight", config_.aux_hidden, hidden);
    add_block("aux.hidden.bias", config_.aux_hidden, 1);
    add_block("aux.out.weight", 1, config_.aux_hidden);
    add_block("aux.out.bias", 1, 1);
  }
  params_.assign(blocks_.empty() ? 0 : blocks_.back().offset + blocks_.back().size(), 0.0);
  initialize(init_rng);
}

void MultiTaskNet::add_block(std::string name, std::size_t rows, std::size_t cols) {
  const std::size_t offset = blocks_.empty() ? 0 : blocks_.back().offset + blocks_.back().size();
  blocks_.push_back(Block{std::move(name), offset, rows, cols});
}

void MultiTaskNet::initialize(SeededRng init_rng) {
  // Weight and bias of a layer share U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  for (std::size_t i = 0; i + 1 < blocks_.size(); i += 2) {
    const auto& w = blocks_[i];
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols));
    SeededRng rng = init_rng.split(i);
    for (std::size_t j = 0; j < w.size() + blocks_[i + 1].size(); ++j) {
      params_[w.offset + j] = bound * (2.0 * rng.uniform() - 1.0);
    }
  }
}

std::size_t MultiTaskNet::distill_input_dim() const {
  std::size_t n = config_.hidden_dim;
  for (std::size_t k = 0; k < num_modalities(); ++k) n += geometry_.output_dim(k);
  return n;
}

std::size_t MultiTaskNet::slot_offset(std::size_t k) const {
  std::size_t off = config_.hidden_dim;
  for (std::size_t j = 0; j < k; ++j) off += geometry_.output_dim(j);
  return off;
}

std::span<const double> MultiTaskNet::block_values(std::size_t index) const {
  const auto& b = blocks_.at(index);
  return std::span<const double>(params_).subspan(b.offset, b.size());
}

std::size_t MultiTaskNet::aux_block() const {
  if (!config_.aux_head) throw std::logic_error("aux loss head is disabled");
  return 4 + 4 * num_modalities();
}

std::vector<double> encode_injection(const ModalitySpec& spec, const Tensor& target,
                                     std::size_t pixels) {
  if (!spec.is_categorical()) {
    if (target.size() != spec.channels * pixels) {
      throw std::invalid_argument("injection for '" + spec.name + "' has wrong size");
    }
    return target.data;
  }
  if (target.size() != pixels) {
    throw std::invalid_argument("injection for '" + spec.name + "' has wrong size");
  }
  std::vector<double> one_hot(spec.channels * pixels, 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    const double y = target.data[p];
    if (!std::isfinite(y)) {
      std::fill(one_hot.begin(), one_hot.end(), std::numeric_limits<double>::quiet_NaN());
      return one_hot;
    }
    const auto cls = static_cast<std::size_t>(y);
    if (cls >= spec.channels) throw std::invalid_argument("injected class out of range");
    one_hot[cls * pixels + p] = 1.0;
  }
  return one_hot;
}

ForwardResult forward(const MultiTaskNet& net, const Tensor& x, const LabelInjection& injection,
                      bool dropout_active, SeededRng& rng) {
  const auto& geo = net.geometry();
  const std::size_t K = net.num_modalities();
  SampleRecord carrier;
  carrier.input = x;
  carrier.targets.resize(K);
  ModalityMask mask(K, 0);
  for (const auto& [k, truth] : injection.provided) {
    if (k >= K) throw std::invalid_argument("injection for unknown modality " + std::to_string(k));
    carrier.targets[k] = truth;
    mask[k] = 1;
  }
  const SampleRecord* ptr = &carrier;
  std::vector<SeededRng> rngs;
  if (dropout_active) rngs.push_back(rng);
  const ParamSnapshot<float> params(net);
  const auto act = run_forward(params.view, std::span(&ptr, 1), std::span(&mask, 1), rngs);
  if (dropout_active) rng = rngs.front();

  ForwardResult result;
  for (std::size_t k = 0; k < K; ++k) {
    const std::vector<std::size_t> shape{geo.modalities[k].channels, geo.height, geo.width};
    result.stage1.emplace_back(shape, std::vector<double>(act.o1[k].data(), act.o1[k].data() + act.o1[k].size()));
    result.stage2.emplace_back(shape, std::vector<double>(act.o2[k].data(), act.o2[k].data() + act.o2[k].size()));
  }
  return result;
}

BatchPrediction predict(const MultiTaskNet& net, std::span<const SampleRecord* const> samples,
                        std::span<const ModalityMask> inject, std::span<SeededRng> dropout_rngs) {
  const std::size_t K = net.num_modalities();
  const ParamSnapshot<float> params(net);
  std::vector<std::vector<MatT<float>>> s1(K), s2(K);
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples.size() - start);
    auto act = run_forward(params.view, samples.subspan(start, n), inject.empty() ? inject : inject.subspan(start, n),
                           dropout_rngs.empty() ? dropout_rngs : dropout_rngs.subspan(start, n));
    for (std::size_t k = 0; k < K; ++k) {
      s1[k].push_back(std::move(act.o1[k]));
      s2[k].push_back(std::move(act.o2[k]));
    }
  }
  BatchPrediction out;
  for (std::size_t k = 0; k < K; ++k) {
    const auto ch = net.geometry().modalities[k].channels;
    out.stage1.push_back(stack_outputs(s1[k], samples.size(), ch, net.geometry()));
    out.stage2.push_back(stack_outputs(s2[k], samples.size(), ch, net.geometry()));
  }
  return out;
}

Tensor encode(const MultiTaskNet& net, std::span<const SampleRecord* const> samples) {
  const std::size_t hidden = net.config().hidden_dim;
  const ParamSnapshot<float> params(net);
  Tensor out({samples.size(), hidden});
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples.size() - start);
    Activations<float> act;
    act.x = gather_inputs<float>(net, samples.subspan(start, n));
    encoder_forward(params.view, act, {});
    std::copy(act.f.data(), act.f.data() + act.f.size(), out.data.begin() + static_cast<std::ptrdiff_t>(start * hidden));
  }
  return out;
}

double aux_loss_head_forward(const MultiTaskNet& net, const Tensor& x) {
  SampleRecord carrier;
  carrier.input = x;
  const SampleRecord* ptr = &carrier;
  return aux_loss_head_forward(net, std::span(&ptr, 1)).front();
}

std::vector<double> aux_loss_head_forward(const MultiTaskNet& net, std::span<const SampleRecord* const> samples) {
  net.aux_block();  // throws when disabled
  const ParamSnapshot<float> params(net);
  std::vector<double> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples.size() - start);
    Activations<float> act;
    act.x = gather_inputs<float>(net, samples.subspan(start, n));
    encoder_forward(params.view, act, {});
    const VecT<float> pred = aux_forward<float>(params.view, act.f, nullptr, nullptr);
    out.insert(out.end(), pred.data(), pred.data() + pred.size());
  }
  return out;
}

LossBreakdown masked_loss(std::span<const ModalitySpec> modalities,
                          const std::vector<ForwardResult>& predictions,
                          std::span<const SampleRecord* const> targets,
                          std::span<const ModalityMask> label_mask,
                          std::span<const double> loss_weights,
                          std::span<const ModalityMask> stage2_mask) {
  const std::size_t N = predictions.size();
  if (targets.size() != N || label_mask.size() != N) {
    throw std::invalid_argument("masked_loss: predictions, targets and mask must have N entries");
  }
  if (!stage2_mask.empty() && stage2_mask.size() != N) {
    throw std::invalid_argument("masked_loss: stage-2 mask must have N entries");
  }
  const std::size_t K = modalities.size();
  if (loss_weights.size() != K) throw std::invalid_argument("masked_loss: one weight per modality");
  LossBreakdown out;
  out.per_modality.assign(K, 0.0);
  bool any = false;
  for (std::size_t k = 0; k < K; ++k) {
    double sum1 = 0.0, sum2 = 0.0;
    std::size_t n1 = 0, n2 = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (label_mask[i].size() != K) throw std::invalid_argument("masked_loss: mask must be N x K");
      const auto& pred = predictions[i];
      const Tensor& s1 = pred.stage1.at(k);
      const auto& spec = modalities[k];
      const std::size_t pixels = s1.size() / spec.channels;
      if (label_mask[i][k]) {
        sum1 += sample_loss(spec, s1.data.data(), targets[i]->targets[k], pixels, static_cast<double*>(nullptr), 0.0);
        ++n1;
      }
      const bool sup2 = stage2_mask.empty() ? label_mask[i][k] != 0 : stage2_mask[i][k] != 0;
      if (sup2) {
        sum2 += sample_loss(spec, pred.stage2.at(k).data.data(), targets[i]->targets[k], pixels,
                            static_cast<double*>(nullptr), 0.0);
        ++n2;
      }
    }
    any = any || n1 > 0;
    if (n1 > 0) out.per_modality[k] += sum1 / static_cast<double>(n1);
    if (n2 > 0) out.per_modality[k] += sum2 / static_cast<double>(n2);
    out.total += loss_weights[k] * out.per_modality[k];
  }
  if (!any) throw std::invalid_argument("masked_loss: nothing to train on (mask is all zero)");
  return out;
}

GradientResult loss_and_gradient(const MultiTaskNet& net, const TrainBatch& batch,
                                 std::span<SeededRng> dropout_rngs) {
  GradientResult res;
  loss_and_gradient(net, batch, dropout_rngs, res);
  return res;
}

void loss_and_gradient(const MultiTaskNet& net, const TrainBatch& batch, std::span<SeededRng> dropout_rngs,
                       GradientResult& out) {
  Gradient<double> g;
  const ParamSnapshot<double> params(net);
  backward(params.view, batch, dropout_rngs, g);
  for (std::size_t i = 0; i < net.blocks().size(); ++i) {
    if (g.touched[i]) continue;
    const auto& blk = net.blocks()[i];
    std::fill_n(g.gradient.begin() + static_cast<std::ptrdiff_t>(blk.offset), blk.size(), 0.0);
  }
  out.loss = std::move(g.loss);
  out.gradient.assign(g.gradient.begin(), g.gradient.end());
  out.touched = std::move(g.touched);
  out.per_sample_loss = std::move(g.per_sample_loss);
  out.aux_loss = g.aux_loss;
}

std::size_t TrainingPool::labelled_pairs() const {
  std::size_t n = 0;
  for (const auto& m : labelled) n += static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; }));
  return n;
}

TrainReport train(MultiTaskNet& net, const TrainingPool& pool, const TrainConfig& config) {
  if (config.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (config.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(config.base_lr > 0.0)) throw std::invalid_argument("train: base_lr must be > 0");
  if (!(config.teacher_forcing_p >= 0.0 && config.teacher_forcing_p <= 1.0)) {
    throw std::invalid_argument("train: teacher_forcing_p must lie in [0, 1]");
  }
  if (pool.samples.size() != pool.labelled.size()) {
    throw std::invalid_argument("train: pool samples and masks differ in length");
  }
  if (pool.labelled_pairs() == 0) throw std::invalid_argument("train: empty labelled pool");

  const std::size_t K = net.num_modalities();
  std::vector<BasicAdamState<float>> states(net.blocks().size());
  for (auto& s : states) {
    s.base_lr = config.base_lr;
    s.weight_decay = config.weight_decay;
  }
  const bool dropout = net.config().dropout_rate > 0.0;
  const SeededRng root(config.seed, 0x7472616eULL);
  TrainReport report;
  std::vector<std::size_t> order(pool.samples.size());
  AlignedVec<float> weights(net.parameters().begin(), net.parameters().end());
  const Params<float> view{net, weights.data()};
  Gradient<float> g;
  std::vector<std::uint8_t> updated(net.blocks().size(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = poly_lr(config.base_lr, epoch, config.epochs);
    const SeededRng epoch_rng = root.split(static_cast<std::uint64_t>(epoch));
    std::iota(order.begin(), order.end(), 0);
    SeededRng shuffle_rng = epoch_rng.split(0);
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0, aux_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      const SeededRng batch_rng = epoch_rng.split(1 + batches);
      SeededRng forcing = batch_rng.split(0);
      TrainBatch batch;
      for (std::size_t j = 0; j < n; ++j) {
        const auto idx = order[start + j];
        batch.samples.push_back(pool.samples[idx]);
        batch.labelled.push_back(pool.labelled[idx]);
        ModalityMask inj(K, 0);
        for (std::size_t k = 0; k < K; ++k) {
          if (pool.labelled[idx][k] && forcing.uniform() < config.teacher_forcing_p) inj[k] = 1;
        }
        batch.injected.push_back(std::move(inj));
      }
      if (std::none_of(batch.labelled.begin(), batch.labelled.end(), [](const ModalityMask& m) {
            return std::any_of(m.begin(), m.end(), [](auto v) { return v != 0; });
          })) {
        ++batches;
        continue;
      }
      std::vector<SeededRng> rngs;
      if (dropout) {
        const SeededRng dr = batch_rng.split(1);
        for (std::size_t j = 0; j < n; ++j) rngs.push_back(dr.split(j));
      }
      backward(view, batch, rngs, g);
      if (!std::isfinite(g.loss.total) || !std::isfinite(g.aux_loss)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      for (std::size_t bi = 0; bi < net.blocks().size(); ++bi) {
        if (!g.touched[bi]) continue;
        updated[bi] = 1;
        const auto& blk = net.blocks()[bi];
        adam_step(std::span<float>(weights).subspan(blk.offset, blk.size()),
                  std::span<const float>(g.gradient).subspan(blk.offset, blk.size()), states[bi], lr);
      }
      loss_sum += g.loss.total;
      aux_sum += g.aux_loss;
      ++batches;
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    if (net.config().aux_head) report.aux_epoch_loss.push_back(aux_sum / static_cast<double>(batches));
  }
  // Blocks Adam never saw keep their exact double values.
  for (std::size_t bi = 0; bi < net.blocks().size(); ++bi) {
    if (!updated[bi]) continue;
    const auto& blk = net.blocks()[bi];
    std::copy_n(weights.begin() + static_cast<std::ptrdiff_t>(blk.offset), blk.size(),
                net.parameters().begin() + static_cast<std::ptrdiff_t>(blk.offset));
  }
  for (double v : net.parameters()) {
    if (!std::isfinite(v)) throw NumericError("train: non-finite parameter after training");
  }
  return report;
}

void save_checkpoint(const MultiTaskNet& net, const std::filesystem::path& stem) {
  const auto& geo = net.geometry();
  const auto& cfg = net.config();
  nlohmann::json header;
  header["format"] = "partal-checkpoint";
  header["version"] = kDatasetFormatVersion;
  header["height"] = geo.height;
  header["width"] = geo.width;
  header["input_channels"] = geo.input_channels;
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : geo.modalities) {
    mods.push_back({{"name", m.name},
                    {"kind", to_string(m.kind)},
                    {"channels", m.channels},
                    {"loss_weight", m.loss_weight},
                    {"metric", to_string(m.metric)},
                    {"higher_is_better", m.higher_is_better}});
  }
  header["modalities"] = mods;
  header["hidden_dim"] = cfg.hidden_dim;
  header["dropout_rate"] = cfg.dropout_rate;
  header["detach_stage1"] = cfg.detach_stage1;
  header["aux_head"] = cfg.aux_head;
  header["aux_hidden"] = cfg.aux_hidden;
  header["parameter_count"] = net.parameters().size();
  container::write(manifest_path(stem), blob_path(stem), header, net.parameters());
}

MultiTaskNet load_checkpoint(const std::filesystem::path& stem) {
  const auto header = container::read_manifest(manifest_path(stem));
  NetGeometry geo;
  NetConfig cfg;
  std::size_t count = 0;
  try {
    if (header.at("format").get<std::string>() != "partal-checkpoint") {
      throw DatasetError(DatasetErrorKind::Format, "manifest is not a checkpoint manifest");
    }
    if (header.at("version").get<int>() != kDatasetFormatVersion) {
      throw DatasetError(DatasetErrorKind::VersionMismatch, "checkpoint version unsupported");
    }
    geo.height = header.at("height").get<std::size_t>();
    geo.width = header.at("width").get<std::size_t>();
    geo.input_channels = header.at("input_channels").get<std::size_t>();
    for (const auto& m : header.at("modalities")) {
      ModalitySpec spec;
      spec.name = m.at("name").get<std::string>();
      spec.kind = m.at("kind").get<std::string>() == "categorical" ? ModalityKind::Categorical
                                                                    : ModalityKind::Continuous;
      spec.channels = m.at("channels").get<std::size_t>();
      spec.loss_weight = m.at("loss_weight").get<double>();
      const auto metric = m.at("metric").get<std::string>();
      spec.metric = metric == "miou" ? MetricKind::MIoU
                    : metric == "rmse" ? MetricKind::RMSE
                                       : MetricKind::MeanAngleError;
      spec.higher_is_better = m.at("higher_is_better").get<bool>();
      geo.modalities.push_back(std::move(spec));
    }
    cfg.hidden_dim = header.at("hidden_dim").get<std::size_t>();
    cfg.dropout_rate = header.at("dropout_rate").get<double>();
    cfg.detach_stage1 = header.at("detach_stage1").get<bool>();
    cfg.aux_head = header.at("aux_head").get<bool>();
    cfg.aux_hidden = header.at("aux_hidden").get<std::size_t>();
    count = header.at("parameter_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(DatasetErrorKind::Format, std::string("checkpoint manifest: ") + e.what());
  }
  MultiTaskNet net(geo, cfg, SeededRng(0));
  if (net.parameters().size() != count) {
    throw DatasetError(DatasetErrorKind::InvariantViolation, "checkpoint parameter count mismatch");
  }
  const auto values = container::read_blob(blob_path(stem), count);
  std::copy(values.begin(), values.end(), net.parameters().begin());
  return net;
}

}  // namespace partal
