// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
// PARTAL_LAB_JOBS sets the worker count of the multi-seed experiments.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "partal/acquisition.hpp"
#include "partal/alcore.hpp"
#include "partal/experiment.hpp"
#include "partal/uncertainty.hpp"
#include "support.hpp"

using namespace partal;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

struct Criterion {
  int id = 0;
  std::string title;
  double limit_seconds = 0.0;  // 0: no runtime bound
};

int failures = 0;

void report(const Criterion& c, const Outcome& o, double seconds) {
  const bool in_time = c.limit_seconds <= 0.0 || seconds < c.limit_seconds;
  const bool pass = o.ok && in_time;
  failures += !pass;
  std::string timing = std::to_string(seconds);
  timing.resize(timing.find('.') + 2);
  if (c.limit_seconds > 0.0) timing += "s / " + std::to_string(static_cast<int>(c.limit_seconds)) + "s";
  else timing += "s";
  std::printf("[%s] %2d %s: %s (%s)%s\n", pass ? "PASS" : "FAIL", c.id, c.title.c_str(), o.detail.c_str(),
              timing.c_str(), in_time ? "" : " over time limit");
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void run(const Criterion& c, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(c, o, seconds_since(t0));
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

double final_delta(const ALRunRecord& run) { return run.iterations.back().metrics.delta_mtl; }

const ALRunRecord& find_run(const RunSet& set, const std::string& strategy, std::uint64_t seed) {
  for (const auto& r : set.runs) {
    if (r.strategy_name == strategy && r.seed == seed) return r;
  }
  throw std::runtime_error("missing run " + strategy + " seed " + std::to_string(seed));
}

// ---------------------------------------------------------------------------

Outcome entropy_identities() {
  double worst = 0.0;
  for (std::size_t C : {2, 3, 4, 10, 40}) {
    const Tensor p({C, 2, 2}, 1.0 / static_cast<double>(C));
    for (double h : shannon_entropy_map(p).data) worst = std::max(worst, std::abs(h - std::log(double(C))));
  }
  const double expected = 0.5 * (1.0 + std::log(2.0 * std::numbers::pi));
  const double g = gaussian_entropy_map(Tensor({1, 1, 1}, 1.0))[0];
  worst = std::max(worst, std::abs(g - expected));
  return {worst < 1e-9, "max deviation " + fmt(worst) + ", gaussian " + fmt(g, 8)};
}

Outcome discretization() {
  const auto pdf = [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); };
  const double h = 0.5 * (1.0 + std::log(2.0 * std::numbers::pi));
  std::vector<double> gaps;
  for (double eps : {0.1, 0.05, 0.01}) gaps.push_back(std::abs(discretized_shannon(pdf, -8.0, 8.0, eps) + std::log(eps) - h));
  const bool monotone = gaps[1] < gaps[0] && gaps[2] < gaps[1];
  return {gaps[2] < 1e-3 && monotone,
          "gaps " + fmt(gaps[0]) + " > " + fmt(gaps[1]) + " > " + fmt(gaps[2]) + (monotone ? "" : " (not monotone)")};
}

double optimal_radius(const Tensor& f, std::size_t k) {
  const std::size_t N = f.shape[0];
  std::vector<std::uint8_t> choose(N, 0);
  std::fill(choose.end() - static_cast<std::ptrdiff_t>(k), choose.end(), 1);
  double best = 1e300;
  do {
    std::vector<std::size_t> centers;
    for (std::size_t i = 0; i < N; ++i) {
      if (choose[i]) centers.push_back(i);
    }
    best = std::min(best, covering_radius(f, centers));
  } while (std::next_permutation(choose.begin(), choose.end()));
  return best;
}

Outcome kcenter() {
  SeededRng rng(2024, 7);
  double worst = 0.0;
  int bad = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(11);
    const std::size_t d = 1 + rng.below(4);
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(n - 1, 5));
    Tensor f({n, d});
    for (auto& v : f.data) v = rng.normal();
    // The greedy's arbitrary first center is the lowest index.
    const auto picked = kcenter_greedy(f, {}, k);
    const double greedy = covering_radius(f, picked);
    const double opt = optimal_radius(f, k);
    const double ratio = opt > 0.0 ? greedy / opt : (greedy == 0.0 ? 1.0 : 1e9);
    worst = std::max(worst, ratio);
    bad += ratio > 2.0 + 1e-12;
  }
  return {bad == 0, "200 instances, worst ratio " + fmt(worst)};
}

Outcome gradients() {
  const auto ds = partal::testing::micro_dataset(6, 1);
  NetConfig nc;
  nc.hidden_dim = 8;
  nc.aux_head = true;
  nc.aux_hidden = 4;
  MultiTaskNet net(NetGeometry::of(ds), nc, SeededRng(3, 1));
  const auto batch = partal::testing::mixed_batch(ds);
  std::vector<SeededRng> rngs;
  for (std::size_t i = 0; i < batch.samples.size(); ++i) rngs.emplace_back(11, i);
  const auto check = partal::testing::finite_difference_check(net, batch, rngs);
  return {check.failures == 0 && check.checked == net.parameters().size(),
          std::to_string(check.checked) + " parameters, " + std::to_string(check.failures) +
              " mismatches, worst relative error " + fmt(check.worst_relative)};
}

bool all_finite(const ALRunRecord& run) {
  for (const auto& it : run.iterations) {
    for (const auto& e : it.metrics.entries) {
      if (!std::isfinite(e.value)) return false;
    }
  }
  return true;
}

Outcome leak_freedom(const Dataset& ds) {
  ALConfig cfg;
  cfg.iterations = 3;
  cfg.train.epochs = 10;
  cfg.mc_passes = 8;
  std::string detail;
  bool ok = true;
  for (auto strategy : {Strategy::PartAL, Strategy::RandomPartial}) {
    auto poisoned_cfg = cfg;
    poisoned_cfg.poison_unrevealed = true;
    const auto clean = run_al(ds, strategy, cfg);
    const auto poisoned = run_al(ds, strategy, poisoned_cfg);
    bool same = clean.iterations.size() == poisoned.iterations.size();
    for (std::size_t i = 0; same && i < clean.iterations.size(); ++i) {
      same = clean.iterations[i].metrics == poisoned.iterations[i].metrics;
    }
    const bool finite = all_finite(poisoned) && poisoned.iterations.size() == 4;
    ok = ok && same && finite;
    detail += to_string(strategy) + (finite ? " finite" : " NaN") + (same ? "/identical" : "/differs") + ", ";
  }

  // Modality 1 is never labelled nor injected: with detached stage 1 both its
  // heads stay bit-identical; otherwise its distillation head does.
  const auto micro = partal::testing::micro_dataset(12, 2);
  TrainingPool pool;
  for (const auto& s : micro.train) {
    pool.samples.push_back(&s);
    pool.labelled.push_back({1, 0});
  }
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 4;
  std::size_t untouched = 0, expected = 0;
  for (bool detach : {false, true}) {
    NetConfig nc;
    nc.hidden_dim = 8;
    nc.detach_stage1 = detach;
    MultiTaskNet net(NetGeometry::of(micro), nc, SeededRng(4, 4));
    const auto before = net;
    train(net, pool, tc);
    std::vector<std::size_t> blocks{net.distill_head_block(1), net.distill_head_block(1) + 1};
    if (detach) blocks.insert(blocks.end(), {net.initial_head_block(1), net.initial_head_block(1) + 1});
    for (auto b : blocks) {
      ++expected;
      const auto x = net.block_values(b), y = before.block_values(b);
      untouched += std::equal(x.begin(), x.end(), y.begin(), y.end());
    }
  }
  ok = ok && untouched == expected;
  detail += std::to_string(untouched) + "/" + std::to_string(expected) + " never-labelled blocks untouched";
  return {ok, detail};
}

Outcome budget_protocol(const Dataset& ds) {
  ExperimentConfig cfg;
  cfg.train.epochs = 3;
  cfg.mc_passes = 4;
  cfg.seeds = {0, 1, 2};
  const auto set = run_strategies(ds, cfg, cfg.strategies, cfg.seeds, resolve_jobs(0));
  std::ostringstream merged;
  write_results_csv(merged, set.runs, ds.modalities);
  const auto rows = read_csv(merged.str());
  std::map<std::string, std::set<std::string>> used_by_iteration;
  std::set<std::string> runs;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    used_by_iteration[rows[i][0]].insert(rows[i][1]);
    runs.insert(rows[i][2] + "/" + rows[i][3]);
  }
  bool ok = runs.size() == 18 && used_by_iteration.size() == 9 && rows.size() == 1 + 18 * 9;
  std::string curve;
  for (const auto& [it, used] : used_by_iteration) {
    ok = ok && used.size() == 1;
    curve += (curve.empty() ? "" : " ") + *used.begin();
  }
  return {ok, std::to_string(runs.size()) + " runs, labels_used per iteration: " + curve};
}

struct Headline {
  RunSet set;
  double seconds = 0.0;
};

Outcome headline(const Headline& h) {
  int wins = 0;
  double partal = 0.0, random = 0.0;
  std::string per_seed;
  for (auto seed : h.set.seeds) {
    const double p = final_delta(find_run(h.set, "partal", seed));
    const double r = final_delta(find_run(h.set, "random", seed));
    wins += p <= r;
    partal += p;
    random += r;
    per_seed += " " + fmt(p, 3) + "/" + fmt(r, 3);
  }
  const double n = static_cast<double>(h.set.seeds.size());
  partal /= n;
  random /= n;
  return {wins >= 4 && partal < random,
          "PartAL <= Random-full in " + std::to_string(wins) + "/5 seeds, mean " + fmt(partal) + " vs " +
              fmt(random) + "; per seed" + per_seed};
}

Outcome random_partial(const Headline& h) {
  double partal = 0.0, rp = 0.0, random = 0.0;
  for (auto seed : h.set.seeds) {
    partal += final_delta(find_run(h.set, "partal", seed));
    rp += final_delta(find_run(h.set, "random_partial", seed));
    random += final_delta(find_run(h.set, "random", seed));
  }
  const double n = static_cast<double>(h.set.seeds.size());
  partal /= n;
  rp /= n;
  random /= n;
  return {rp <= random && partal <= rp,
          "seed means: PartAL " + fmt(partal) + ", Random-partial " + fmt(rp) + ", Random-full " + fmt(random)};
}

Outcome normalization(const Headline& h, const std::vector<ALRunRecord>& raw) {
  int wins = 0;
  std::string per_seed;
  for (std::size_t i = 0; i < h.set.seeds.size(); ++i) {
    const double p = final_delta(find_run(h.set, "partal", h.set.seeds[i]));
    const double r = final_delta(raw[i]);
    wins += p <= r;
    per_seed += " " + fmt(p, 3) + "/" + fmt(r, 3);
  }
  return {wins >= 3, "normalized <= raw in " + std::to_string(wins) + "/5 seeds; per seed" + per_seed};
}

Outcome hardest(const Dataset& ds) {
  ExperimentConfig cfg;
  cfg.strategies = {"partal", "random"};
  std::ostringstream out;
  run_ablation(ds, cfg, AblationMode::Hardest, resolve_jobs(0), out);
  const auto rows = read_csv(out.str());
  const auto& header = rows.at(0);
  const std::size_t K = ds.num_modalities();
  std::map<std::string, std::vector<double>> mean;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    auto& m = mean[rows[i][1]];
    m.resize(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) m[k] += std::stod(rows[i][4 + k]) / static_cast<double>(cfg.seeds.size());
  }
  int harder = 0;
  std::string detail;
  for (std::size_t k = 0; k < K; ++k) {
    const bool higher_is_better = ds.modalities[k].higher_is_better;
    const double p = mean.at("partal")[k], r = mean.at("random")[k];
    // Error comparison: for mIoU a lower score is a larger error.
    const bool at_least = higher_is_better ? p <= r : p >= r;
    harder += at_least;
    detail += (detail.empty() ? "" : ", ") + header[4 + k] + " " + fmt(p) + " vs " + fmt(r);
  }
  return {harder >= 2, "PartAL picks have error >= Random's on " + std::to_string(harder) + "/3 (" + detail + ")"};
}

Outcome inference(const Dataset& ds) {
  ExperimentConfig cfg;
  std::ostringstream out;
  run_ablation(ds, cfg, AblationMode::Inference, resolve_jobs(0), out);
  const auto rows = read_csv(out.str());
  // (target, subset size) -> seed-mean value
  std::map<std::pair<std::string, std::string>, double> mean;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    mean[{rows[i][3], rows[i][1]}] += std::stod(rows[i][5]) / static_cast<double>(cfg.seeds.size());
  }
  int better = 0;
  std::string detail;
  for (const auto& spec : ds.modalities) {
    const double none = mean.at({spec.name, "0"}), two = mean.at({spec.name, "2"});
    const bool ok = spec.higher_is_better ? two >= none : two <= none;
    better += ok;
    detail += (detail.empty() ? "" : ", ") + spec.name + " " + fmt(none) + " -> " + fmt(two);
  }
  return {better == static_cast<int>(ds.num_modalities()) && rows.size() == 1 + 12 * cfg.seeds.size(),
          std::to_string(better) + "/3 targets improve with |S|=2 (" + detail + ")"};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PARTAL_LAB_EXE) + " " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

Outcome determinism() {
  const auto dir = fs::temp_directory_path() / "partal_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "config.ini") << "[dataset]\npath = " << (dir / "data").string()
                                    << "\nn_train = 120\nn_test = 40\n"
                                       "[model]\nepochs = 4\n"
                                       "[al]\ninitial_fully_labelled = 20\niterations = 3\nbudget_per_iteration = 12\n"
                                       "mc_passes = 4\nseeds = 0, 1\n";
  const std::string config = "--config " + (dir / "config.ini").string();
  if (run_cli("generate " + config) != 0) return {false, "generate failed"};
  std::vector<std::string> merged;
  for (const auto* jobs : {"1", "1", "2"}) {
    const auto out = dir / ("out_" + std::to_string(merged.size()));
    if (run_cli("run " + config + " --out " + out.string() + " --jobs " + jobs) != 0) return {false, "run failed"};
    merged.push_back(read_file(out / "results.csv"));
  }
  const bool ok = !merged[0].empty() && merged[0] == merged[1] && merged[0] == merged[2];
  const auto lines = std::count(merged[0].begin(), merged[0].end(), '\n');
  fs::remove_all(dir);
  return {ok, std::string(ok ? "identical" : "different") + " merged CSVs (" + std::to_string(lines) +
                  " lines) for --jobs 1, 1, 2"};
}

}  // namespace

int main() {
  const ExperimentConfig reference;
  const auto t_data = std::chrono::steady_clock::now();
  const Dataset ds = generate_dataset(reference.generator, reference.dataset_seed);
  std::printf("reference dataset: %zu train / %zu test, %zux%zu, K=%zu (%.1fs); jobs=%zu\n", ds.train.size(),
              ds.test.size(), ds.height, ds.width, ds.num_modalities(), seconds_since(t_data), resolve_jobs(0));
  std::fflush(stdout);

  run({1, "entropy identities", 1}, entropy_identities);
  run({2, "discretization equivalence", 5}, discretization);
  run({3, "k-center greedy 2-approximation", 60}, kcenter);
  run({4, "gradient correctness", 60}, gradients);
  run({5, "masked-loss leak-freedom", 120}, [&] { return leak_freedom(ds); });
  run({6, "budget protocol", 0}, [&] { return budget_protocol(ds); });

  // Criteria 7 and 11 share one set of runs; 10 reuses the PartAL runs.
  Headline h;
  std::string headline_error;
  const auto t7 = std::chrono::steady_clock::now();
  try {
    h.set = run_strategies(ds, reference, {"partal", "random", "random_partial"}, reference.seeds, resolve_jobs(0));
  } catch (const std::exception& e) {
    headline_error = e.what();
  }
  h.seconds = seconds_since(t7);
  const auto shared = [&](const std::function<Outcome()>& body) {
    return headline_error.empty() ? body() : Outcome{false, "exception: " + headline_error};
  };
  report({7, "directional headline", 900}, shared([&] { return headline(h); }), h.seconds);

  run({8, "hardest-examples ablation", 300}, [&] { return hardest(ds); });
  run({9, "improved-inference ablation", 180}, [&] { return inference(ds); });

  {
    const auto t10 = std::chrono::steady_clock::now();
    std::vector<ALRunRecord> raw(reference.seeds.size());
    Outcome o;
    try {
      if (!headline_error.empty()) throw std::runtime_error(headline_error);
      parallel_for(raw.size(), resolve_jobs(0), [&](std::size_t i) {
        auto al = reference.al_config(reference.seeds[i]);
        al.normalize = false;
        raw[i] = run_al(ds, Strategy::PartAL, al, &h.set.full[i]);
      });
      o = normalization(h, raw);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    double partal_seconds = 0.0;
    for (const auto& r : h.set.runs) {
      if (r.strategy_name != "partal") continue;
      for (const auto& it : r.iterations) partal_seconds += it.wall_seconds;
    }
    report({10, "normalization ablation", 900}, o, seconds_since(t10) + partal_seconds);
  }

  report({11, "random-partial ablation", 900}, shared([&] { return random_partial(h); }), h.seconds);
  run({12, "determinism", 0}, determinism);

  std::printf("%d of 12 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
