#include "partal/alcore.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "partal/errors.hpp"

namespace partal {

namespace {

// Stream ids under the run seed.
constexpr std::uint64_t kInitStream = 0x696e6974;
constexpr std::uint64_t kTrainStream = 0x74726169;
constexpr std::uint64_t kMcStream = 0x6d63;
constexpr std::uint64_t kAcquireStream = 0x61637175;
constexpr std::uint64_t kInitialSetStream = 0x73657430;

struct StrategyName {
  Strategy strategy;
  const char* name;
};

constexpr StrategyName kStrategyNames[] = {
    {Strategy::PartAL, "partal"}, {Strategy::Random, "random"},   {Strategy::RandomPartial, "random_partial"},
    {Strategy::RBAL, "rbal"},     {Strategy::Coreset, "coreset"}, {Strategy::LLoss, "lloss"},
};

std::string valid_names() {
  std::string out;
  for (const auto& s : kStrategyNames) {
    if (!out.empty()) out += ", ";
    out += s.name;
  }
  return out;
}

TrainingPool labelled_pool(const std::vector<SampleRecord>& view, const LabelState& state) {
  TrainingPool pool;
  for (std::size_t i = 0; i < view.size(); ++i) {
    if (!state.any_labelled(i)) continue;
    pool.samples.push_back(&view[i]);
    pool.labelled.push_back(state.row(i));
  }
  return pool;
}

MultiTaskNet fresh_net(const Dataset& ds, const ALConfig& cfg, bool aux_head) {
  NetConfig nc = cfg.net;
  nc.aux_head = nc.aux_head || aux_head;
  return MultiTaskNet(NetGeometry::of(ds), nc, SeededRng(cfg.seed, kInitStream));
}

TrainConfig train_config_for(const ALConfig& cfg, std::uint64_t round) {
  TrainConfig tc = cfg.train;
  tc.seed = mix64(cfg.seed ^ mix64(kTrainStream + round));
  return tc;
}

Tensor stacked_targets(std::span<const SampleRecord* const> samples, std::size_t k) {
  const auto& first = samples.front()->targets[k];
  std::vector<std::size_t> shape{samples.size()};
  shape.insert(shape.end(), first.shape.begin(), first.shape.end());
  std::vector<double> data;
  data.reserve(Tensor::element_count(shape));
  for (const auto* s : samples) data.insert(data.end(), s->targets[k].data.begin(), s->targets[k].data.end());
  return Tensor(std::move(shape), std::move(data));
}

// [N, C, H, W] scores -> [N, H, W] class indices, ties to the lower class.
Tensor argmax_channels(const Tensor& scores) {
  const std::size_t N = scores.shape[0], C = scores.shape[1];
  const std::size_t P = scores.shape[2] * scores.shape[3];
  Tensor out({N, scores.shape[2], scores.shape[3]}, std::vector<double>(N * P, 0.0));
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c) {
        if (scores.data[(n * C + c) * P + p] > scores.data[(n * C + best) * P + p]) best = c;
      }
      out.data[n * P + p] = static_cast<double>(best);
    }
  }
  return out;
}

MetricEntry score_modality(const ModalitySpec& spec, const Tensor& pred, const Tensor& target) {
  MetricEntry e{spec.name, spec.metric, 0.0, spec.higher_is_better};
  switch (spec.metric) {
    case MetricKind::RMSE: e.value = rmse(pred, target); break;
    case MetricKind::MeanAngleError: e.value = mean_angle_error(pred, target).degrees; break;
    case MetricKind::MIoU: e.value = miou(argmax_channels(pred), target, spec.channels); break;
  }
  return e;
}

std::vector<const SampleRecord*> pointers(const std::vector<SampleRecord>& records) {
  std::vector<const SampleRecord*> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(&r);
  return out;
}

struct Selection {
  AcquisitionBatch batch;
  std::optional<std::uint64_t> normalization_hash;
};

// One acquisition step against the current model and label state.
class Acquirer {
 public:
  Acquirer(Strategy strategy, const ALConfig& cfg, bool normalize)
      : strategy_(strategy), cfg_(cfg), normalize_(normalize) {}

  Selection select(const MultiTaskNet& net, const std::vector<SampleRecord>& view, const LabelState& state,
                   int iteration, std::size_t budget) {
    const std::size_t K = state.num_modalities();
    const SeededRng root(cfg_.seed, 0);
    SeededRng acquire_rng = root.split(kAcquireStream).split(static_cast<std::uint64_t>(iteration));
    const SeededRng mc_rng = root.split(kMcStream).split(static_cast<std::uint64_t>(iteration));

    std::vector<std::int64_t> unlabelled_ids;
    std::vector<const SampleRecord*> unlabelled, labelled;
    for (std::size_t i = 0; i < view.size(); ++i) {
      if (state.fully_unlabelled(i)) {
        unlabelled_ids.push_back(view[i].sample_id);
        unlabelled.push_back(&view[i]);
      } else {
        labelled.push_back(&view[i]);
      }
    }

    Selection sel;
    switch (strategy_) {
      case Strategy::PartAL: {
        auto m = compute_uncertainty(net, view, state, cfg_.mc_passes, mc_rng);
        if (normalize_) {
          if (!frozen_.frozen()) frozen_.fit(m, iteration);
          m.normalized = apply_normalization(m, frozen_.params());
          sel.normalization_hash = frozen_.params().hash();
        } else {
          m.normalized = m.raw;
        }
        sel.batch = select_partal(m, budget);
        break;
      }
      case Strategy::Random:
        sel.batch = select_random_full(unlabelled_ids, budget, K, acquire_rng);
        break;
      case Strategy::RandomPartial: {
        std::vector<PairId> pairs;
        for (std::size_t i = 0; i < view.size(); ++i) {
          for (std::size_t k = 0; k < K; ++k) {
            if (!state.labelled(i, k)) pairs.push_back({view[i].sample_id, k});
          }
        }
        sel.batch = select_random_partial(pairs, budget, acquire_rng);
        break;
      }
      case Strategy::RBAL: {
        const auto m = compute_uncertainty(net, view, state, cfg_.mc_passes, mc_rng, true);
        sel.batch = select_rbal(m, budget, K);
        break;
      }
      case Strategy::Coreset:
        sel.batch = select_coreset(net, unlabelled, labelled, budget, K);
        break;
      case Strategy::LLoss:
        sel.batch = select_learning_loss(net, unlabelled, budget, K);
        break;
    }
    return sel;
  }

  const FrozenNormalization& normalization() const { return frozen_; }

 private:
  Strategy strategy_;
  const ALConfig& cfg_;
  bool normalize_;
  FrozenNormalization frozen_;
};

}  // namespace

std::string to_string(Strategy strategy) {
  for (const auto& s : kStrategyNames) {
    if (s.strategy == strategy) return s.name;
  }
  throw std::logic_error("unknown strategy enum");
}

Strategy parse_strategy(const std::string& name) {
  for (const auto& s : kStrategyNames) {
    if (name == s.name) return s.strategy;
  }
  throw ConfigError("unknown strategy '" + name + "'; valid: " + valid_names());
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all = [] {
    std::vector<Strategy> v;
    for (const auto& s : kStrategyNames) v.push_back(s.strategy);
    return v;
  }();
  return all;
}

bool labels_full_images(Strategy strategy) {
  return strategy != Strategy::PartAL && strategy != Strategy::RandomPartial;
}

LabelState::LabelState(std::size_t num_samples, std::size_t num_modalities)
    : num_samples_(num_samples), num_modalities_(num_modalities), bits_(num_samples * num_modalities, 0) {}

void LabelState::reveal(const PairId& pair) {
  const auto s = static_cast<std::size_t>(pair.sample);
  if (pair.sample < 0 || s >= num_samples_ || pair.modality >= num_modalities_) {
    throw std::out_of_range("LabelState::reveal: pair out of range");
  }
  auto& bit = bits_[s * num_modalities_ + pair.modality];
  if (bit) {
    throw std::logic_error("LabelState::reveal: pair (" + std::to_string(pair.sample) + ", " +
                           std::to_string(pair.modality) + ") already labelled");
  }
  bit = 1;
  ++count_;
}

bool LabelState::any_labelled(std::size_t sample) const {
  for (std::size_t k = 0; k < num_modalities_; ++k) {
    if (labelled(sample, k)) return true;
  }
  return false;
}

bool LabelState::fully_labelled(std::size_t sample) const {
  for (std::size_t k = 0; k < num_modalities_; ++k) {
    if (!labelled(sample, k)) return false;
  }
  return true;
}

ModalityMask LabelState::row(std::size_t sample) const {
  return ModalityMask(bits_.begin() + static_cast<std::ptrdiff_t>(sample * num_modalities_),
                      bits_.begin() + static_cast<std::ptrdiff_t>((sample + 1) * num_modalities_));
}

Oracle::Oracle(const Dataset& dataset, std::size_t cap, bool poison_unrevealed)
    : dataset_(&dataset), cap_(cap), poison_(poison_unrevealed) {
  if (poison_) {
    poisoned_ = dataset.train;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (auto& r : poisoned_) {
      for (auto& t : r.targets) std::fill(t.data.begin(), t.data.end(), nan);
    }
  }
}

void Oracle::reveal(const AcquisitionBatch& batch, LabelState& state) {
  if (spent_ + batch.cost() > cap_) {
    throw std::logic_error("Oracle: request of " + std::to_string(batch.cost()) + " units exceeds the cap (" +
                           std::to_string(spent_) + "/" + std::to_string(cap_) + " spent)");
  }
  // Sample ids of the training split are their indices.
  for (const auto& p : batch.pairs) {
    state.reveal(p);
    if (poison_) {
      const auto s = static_cast<std::size_t>(p.sample);
      poisoned_[s].targets[p.modality] = dataset_->train[s].targets[p.modality];
    }
  }
  spent_ += batch.cost();
}

const std::vector<SampleRecord>& Oracle::view() const { return poison_ ? poisoned_ : dataset_->train; }

MetricsReport evaluate(const MultiTaskNet& net, std::span<const SampleRecord* const> samples,
                       std::span<const ModalityMask> inject) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  const auto pred = predict(net, samples, inject, {});
  const auto& mods = net.geometry().modalities;
  MetricsReport report;
  for (std::size_t k = 0; k < mods.size(); ++k) {
    report.entries.push_back(score_modality(mods[k], pred.stage2[k], stacked_targets(samples, k)));
  }
  return report;
}

MetricsReport evaluate(const MultiTaskNet& net, const std::vector<SampleRecord>& samples) {
  const auto ptrs = pointers(samples);
  return evaluate(net, ptrs);
}

std::vector<std::int64_t> initial_labelled_set(std::size_t num_samples, std::size_t count, std::uint64_t seed) {
  if (count > num_samples) throw std::invalid_argument("initial set larger than the pool");
  std::vector<std::int64_t> ids(num_samples);
  std::iota(ids.begin(), ids.end(), 0);
  SeededRng rng(seed, kInitialSetStream);
  rng.shuffle(ids);
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

UncertaintyMatrix compute_uncertainty(const MultiTaskNet& net, const std::vector<SampleRecord>& pool,
                                      const LabelState& state, std::size_t passes, const SeededRng& rng,
                                      bool fully_unlabelled_only) {
  const std::size_t K = state.num_modalities();
  UncertaintyMatrix m;
  m.num_modalities = K;
  std::vector<const SampleRecord*> samples;
  std::vector<ModalityMask> inject;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (state.fully_labelled(i)) continue;
    if (fully_unlabelled_only && state.any_labelled(i)) continue;
    samples.push_back(&pool[i]);
    inject.push_back(state.row(i));
    m.sample_ids.push_back(pool[i].sample_id);
  }
  const auto summaries = mc_predict_many(net, samples, inject, passes, rng);
  const auto& mods = net.geometry().modalities;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const auto u = image_uncertainties(summaries[j], mods);
    m.raw.insert(m.raw.end(), u.begin(), u.end());
    for (std::size_t k = 0; k < K; ++k) m.candidate.push_back(inject[j][k] ? 0 : 1);
  }
  return m;
}

ALRunRecord run_al(const Dataset& dataset, Strategy strategy, const ALConfig& config,
                   const MetricsReport* reference) {
  if (config.initial_fully_labelled < 1) throw std::invalid_argument("run_al: initial_fully_labelled must be >= 1");
  if (config.budget_per_iteration < 1) throw std::invalid_argument("run_al: budget_per_iteration must be >= 1");
  if (config.iterations < 0) throw std::invalid_argument("run_al: iterations must be >= 0");
  for (std::size_t i = 0; i < dataset.train.size(); ++i) {
    if (dataset.train[i].sample_id != static_cast<std::int64_t>(i)) {
      throw std::invalid_argument("run_al: training sample ids must equal their indices");
    }
  }
  const std::size_t K = dataset.num_modalities();
  const std::size_t N = dataset.train.size();

  ALRunRecord record;
  record.strategy = strategy;
  record.strategy_name = to_string(strategy);
  if (strategy == Strategy::PartAL && !config.normalize) record.strategy_name = "partal_raw";
  record.seed = config.seed;

  const std::size_t cap = config.initial_fully_labelled * K +
                          static_cast<std::size_t>(config.iterations) * config.budget_per_iteration;
  Oracle oracle(dataset, cap, config.poison_unrevealed);
  LabelState state(N, K);
  state.initial_set = initial_labelled_set(N, config.initial_fully_labelled, config.seed);
  {
    AcquisitionBatch initial;
    for (auto id : state.initial_set) {
      for (std::size_t k = 0; k < K; ++k) initial.pairs.push_back({id, k});
    }
    oracle.reveal(initial, state);
  }

  Acquirer acquirer(strategy, config, config.normalize);
  const bool aux = strategy == Strategy::LLoss;
  std::optional<MultiTaskNet> net;
  const auto test = pointers(dataset.test);

  for (int it = 0; it <= config.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    ALIterationRecord rec;
    rec.iteration = it;
    if (it > 0) {
      const std::size_t budget = std::min(config.budget_per_iteration, oracle.cap() - oracle.spent());
      auto sel = acquirer.select(*net, oracle.view(), state, it, budget);
      if (sel.batch.pairs.empty()) {
        record.exhausted = true;
        break;
      }
      oracle.reveal(sel.batch, state);
      rec.revealed = sel.batch.cost();
      rec.normalization_hash = sel.normalization_hash;
      if (sel.batch.exhausted) record.exhausted = true;
    }
    if (!net || config.train.reinit_each_iteration) net.emplace(fresh_net(dataset, config, aux));
    train(*net, labelled_pool(oracle.view(), state), train_config_for(config, static_cast<std::uint64_t>(it)));

    rec.labels_used = oracle.spent();
    rec.metrics = evaluate(*net, test);
    if (reference) rec.metrics.delta_mtl = delta_mtl(rec.metrics, *reference);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record.iterations.push_back(std::move(rec));
    if (record.exhausted) break;
  }
  if (acquirer.normalization().frozen()) record.normalization = acquirer.normalization().params();
  record.oracle_spent = oracle.spent();
  return record;
}

FullSupervision run_full_supervision(const Dataset& dataset, const ALConfig& config) {
  const std::size_t K = dataset.num_modalities();
  LabelState state(dataset.train.size(), K);
  for (std::size_t i = 0; i < dataset.train.size(); ++i) {
    for (std::size_t k = 0; k < K; ++k) state.reveal({static_cast<std::int64_t>(i), k});
  }
  FullSupervision out{MetricsReport{}, fresh_net(dataset, config, false)};
  constexpr std::uint64_t kFullRound = 0x66756c6c;
  train(out.net, labelled_pool(dataset.train, state), train_config_for(config, kFullRound));
  out.metrics = evaluate(out.net, dataset.test);
  return out;
}

std::vector<double> delta_gap(const ALRunRecord& run, const MetricsReport& full) {
  if (run.iterations.empty()) throw std::invalid_argument("delta_gap: run has no iterations");
  const auto& last = run.iterations.back().metrics;
  if (last.entries.size() != full.entries.size()) throw std::invalid_argument("delta_gap: modality lists differ");
  std::vector<double> gap;
  for (const auto& ref : full.entries) {
    const MetricEntry* cur = nullptr;
    for (const auto& e : last.entries) {
      if (e.name == ref.name) cur = &e;
    }
    if (!cur || cur->kind != ref.kind) throw std::invalid_argument("delta_gap: modality '" + ref.name + "' mismatch");
    gap.push_back(cur->value - ref.value);
  }
  return gap;
}

std::vector<HardestRow> hardest_examples_probe(const MultiTaskNet& net, const std::vector<SampleRecord>& pool,
                                               const LabelState& state, std::span<const Strategy> strategies,
                                               std::size_t per_strategy_budget, const ALConfig& config) {
  std::vector<HardestRow> rows;
  if (per_strategy_budget == 0) return rows;
  for (auto strategy : strategies) {
    if (strategy == Strategy::LLoss && !net.config().aux_head) {
      throw std::invalid_argument("hardest_examples_probe: lloss needs a model with the aux head");
    }
    Acquirer acquirer(strategy, config, config.normalize);
    const auto sel = acquirer.select(net, pool, state, 1, per_strategy_budget);
    HardestRow row;
    row.strategy = to_string(strategy);
    row.pairs = sel.batch.cost();
    std::vector<std::int64_t> ids;
    for (const auto& p : sel.batch.pairs) ids.push_back(p.sample);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    row.images = ids.size();
    if (!ids.empty()) {
      std::vector<const SampleRecord*> chosen;
      for (auto id : ids) chosen.push_back(&pool[static_cast<std::size_t>(id)]);
      row.metrics = evaluate(net, chosen).entries;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<InferenceRow> partial_inference_probe(const MultiTaskNet& net, const std::vector<SampleRecord>& test) {
  const std::size_t K = net.num_modalities();
  if (K > 16) throw std::invalid_argument("partial_inference_probe: too many modalities");
  const auto samples = pointers(test);
  std::vector<std::uint32_t> subsets;
  for (std::uint32_t s = 0; s < (1u << K); ++s) {
    if (std::popcount(s) < static_cast<int>(K)) subsets.push_back(s);
  }
  // Grouped by size, then lexicographic by member list.
  auto members = [K](std::uint32_t s) {
    std::vector<std::size_t> m;
    for (std::size_t k = 0; k < K; ++k) {
      if (s & (1u << k)) m.push_back(k);
    }
    return m;
  };
  std::sort(subsets.begin(), subsets.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (std::popcount(a) != std::popcount(b)) return std::popcount(a) < std::popcount(b);
    return members(a) < members(b);
  });

  std::vector<InferenceRow> rows;
  for (auto s : subsets) {
    ModalityMask mask(K, 0);
    for (std::size_t k = 0; k < K; ++k) mask[k] = (s >> k) & 1u;
    const std::vector<ModalityMask> inject(samples.size(), mask);
    const auto report = evaluate(net, samples, inject);
    for (std::size_t t = 0; t < K; ++t) {
      if (mask[t]) continue;
      rows.push_back({members(s), t, report.entries[t]});
    }
  }
  return rows;
}

bool at_least_as_good(const MetricEntry& a, const MetricEntry& b) {
  return a.higher_is_better ? a.value >= b.value : a.value <= b.value;
}

}  // namespace partal
