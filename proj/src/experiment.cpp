#include "partal/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "partal/errors.hpp"

namespace partal {

namespace {

namespace pt = boost::property_tree;

constexpr const char* kRawPartal = "partal_raw";

template <typename T>
T parse_value(const std::string& key, const std::string& raw) {
  const std::string text = raw;
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  std::from_chars_result res{};
  if constexpr (std::is_same_v<T, double>) {
    res = std::from_chars(first, last, value);
  } else {
    res = std::from_chars(first, last, value, 10);
  }
  if (res.ec != std::errc{} || res.ptr != last || text.empty()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + raw + "'");
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + raw + "'");
}

std::vector<std::string> split_list(const std::string& raw) {
  std::vector<std::string> out;
  std::string item;
  for (char c : raw + ",") {
    if (c == ',' || c == ' ' || c == '\t') {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else {
      item += c;
    }
  }
  return out;
}

/// One INI key bound to a config field.
struct Field {
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> read;
  std::function<std::string(const ExperimentConfig&)> write;
};

template <typename T, typename Get>
Field number_field(Get get) {
  return {[get](ExperimentConfig& c, const std::string& key, const std::string& v) {
            get(c) = parse_value<T>(key, v);
          },
          [get](const ExperimentConfig& c) {
            auto& value = get(const_cast<ExperimentConfig&>(c));
            if constexpr (std::is_same_v<T, double>) {
              return format_number(value);
            } else {
              return std::to_string(value);
            }
          }};
}

template <typename Get>
Field bool_field(Get get) {
  return {[get](ExperimentConfig& c, const std::string& key, const std::string& v) { get(c) = parse_bool(key, v); },
          [get](const ExperimentConfig& c) {
            return std::string(get(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          }};
}

using Schema = std::vector<std::pair<std::string, std::vector<std::pair<std::string, Field>>>>;

const Schema& schema() {
  using C = ExperimentConfig;
  static const Schema s = {
      {"dataset",
       {
           {"path", Field{[](C& c, const std::string&, const std::string& v) { c.dataset_path = v; },
                          [](const C& c) { return c.dataset_path.generic_string(); }}},
           {"height", number_field<std::size_t>([](C& c) -> auto& { return c.generator.height; })},
           {"width", number_field<std::size_t>([](C& c) -> auto& { return c.generator.width; })},
           {"num_bumps", number_field<std::size_t>([](C& c) -> auto& { return c.generator.num_bumps; })},
           {"noise_std", number_field<double>([](C& c) -> auto& { return c.generator.noise_std; })},
           {"num_classes", number_field<std::size_t>([](C& c) -> auto& { return c.generator.num_classes; })},
           {"n_train", number_field<std::size_t>([](C& c) -> auto& { return c.generator.n_train; })},
           {"n_test", number_field<std::size_t>([](C& c) -> auto& { return c.generator.n_test; })},
           {"seed", number_field<std::uint64_t>([](C& c) -> auto& { return c.dataset_seed; })},
       }},
      {"model",
       {
           {"hidden_dim", number_field<std::size_t>([](C& c) -> auto& { return c.net.hidden_dim; })},
           {"dropout_rate", number_field<double>([](C& c) -> auto& { return c.net.dropout_rate; })},
           {"detach_stage1", bool_field([](C& c) -> auto& { return c.net.detach_stage1; })},
           {"teacher_forcing_p", number_field<double>([](C& c) -> auto& { return c.train.teacher_forcing_p; })},
           {"epochs", number_field<int>([](C& c) -> auto& { return c.train.epochs; })},
           {"base_lr", number_field<double>([](C& c) -> auto& { return c.train.base_lr; })},
           {"weight_decay", number_field<double>([](C& c) -> auto& { return c.train.weight_decay; })},
           {"batch_size", number_field<std::size_t>([](C& c) -> auto& { return c.train.batch_size; })},
           {"reinit_each_iteration", bool_field([](C& c) -> auto& { return c.train.reinit_each_iteration; })},
       }},
      {"al",
       {
           {"initial_fully_labelled", number_field<std::size_t>([](C& c) -> auto& { return c.initial_fully_labelled; })},
           {"iterations", number_field<int>([](C& c) -> auto& { return c.iterations; })},
           {"budget_per_iteration", number_field<std::size_t>([](C& c) -> auto& { return c.budget_per_iteration; })},
           {"mc_passes", number_field<std::size_t>([](C& c) -> auto& { return c.mc_passes; })},
           {"probe_budget", number_field<std::size_t>([](C& c) -> auto& { return c.probe_budget; })},
           {"strategies", Field{[](C& c, const std::string&, const std::string& v) { c.strategies = split_list(v); },
                                [](const C& c) {
                                  std::string out;
                                  for (const auto& s : c.strategies) out += (out.empty() ? "" : ",") + s;
                                  return out;
                                }}},
           {"seeds", Field{[](C& c, const std::string& key, const std::string& v) {
                             c.seeds.clear();
                             for (const auto& item : split_list(v)) c.seeds.push_back(parse_value<std::uint64_t>(key, item));
                           },
                           [](const C& c) {
                             std::string out;
                             for (auto s : c.seeds) out += (out.empty() ? "" : ",") + std::to_string(s);
                             return out;
                           }}},
       }},
      {"output",
       {
           {"directory", Field{[](C& c, const std::string&, const std::string& v) { c.output_dir = v; },
                               [](const C& c) { return c.output_dir.generic_string(); }}},
           {"emit_plot_data", bool_field([](C& c) -> auto& { return c.emit_plot_data; })},
       }},
  };
  return s;
}

std::vector<std::string> metric_columns(const std::vector<ModalitySpec>& modalities) {
  std::vector<std::string> cols;
  for (const auto& m : modalities) cols.push_back(metric_column(m));
  return cols;
}

struct RunKey {
  Strategy strategy;
  bool normalize;
};

RunKey parse_run_strategy(const std::string& name) {
  if (name == kRawPartal) return {Strategy::PartAL, false};
  try {
    return {parse_strategy(name), true};
  } catch (const ConfigError&) {
    throw ConfigError("unknown strategy '" + name + "'; valid: partal, random, random_partial, rbal, coreset, lloss");
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string item;
  for (char c : line) {
    if (c == ',') {
      out.push_back(item);
      item.clear();
    } else {
      item += c;
    }
  }
  out.push_back(item);
  return out;
}

}  // namespace

std::string format_number(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

ALConfig ExperimentConfig::al_config(std::uint64_t seed) const {
  ALConfig al;
  al.initial_fully_labelled = initial_fully_labelled;
  al.iterations = iterations;
  al.budget_per_iteration = budget_per_iteration;
  al.train = train;
  al.net = net;
  al.mc_passes = mc_passes;
  al.seed = seed;
  return al;
}

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  for (const auto& [section, keys] : tree) {
    const auto sec = std::find_if(schema().begin(), schema().end(), [&](const auto& s) { return s.first == section; });
    if (sec == schema().end()) {
      if (keys.empty()) throw ConfigError("config key '" + section + "' must live inside a section");
      throw ConfigError("unknown config section '[" + section + "]'");
    }
    for (const auto& [key, node] : keys) {
      const auto field = std::find_if(sec->second.begin(), sec->second.end(), [&](const auto& f) { return f.first == key; });
      const std::string full = section + "." + key;
      if (field == sec->second.end()) throw ConfigError("unknown config key '" + full + "'");
      field->second.read(cfg, full, node.data());
    }
  }
  validate_config(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string serialize_config(const ExperimentConfig& config) {
  std::ostringstream out;
  bool first = true;
  for (const auto& [section, fields] : schema()) {
    if (!first) out << '\n';
    first = false;
    out << '[' << section << "]\n";
    for (const auto& [key, field] : fields) out << key << " = " << field.write(config) << '\n';
  }
  return out.str();
}

void validate_config(const ExperimentConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (c.generator.height < 4 || c.generator.width < 4) fail("dataset.height and dataset.width must be >= 4");
  if (c.generator.num_bumps < 1) fail("dataset.num_bumps must be >= 1");
  if (!(c.generator.noise_std >= 0.0)) fail("dataset.noise_std must be >= 0");
  if (c.generator.num_classes < 2) fail("dataset.num_classes must be >= 2");
  if (c.generator.n_train < 1 || c.generator.n_test < 1) fail("dataset.n_train and dataset.n_test must be >= 1");
  if (c.net.hidden_dim < 1) fail("model.hidden_dim must be >= 1");
  if (!(c.net.dropout_rate >= 0.0 && c.net.dropout_rate < 1.0)) fail("model.dropout_rate must lie in [0, 1)");
  if (!(c.train.teacher_forcing_p >= 0.0 && c.train.teacher_forcing_p <= 1.0)) {
    fail("model.teacher_forcing_p must lie in [0, 1]");
  }
  if (c.train.epochs < 1) fail("model.epochs must be >= 1");
  if (!(c.train.base_lr > 0.0)) fail("model.base_lr must be > 0");
  if (!(c.train.weight_decay >= 0.0)) fail("model.weight_decay must be >= 0");
  if (c.train.batch_size < 1) fail("model.batch_size must be >= 1");
  if (c.initial_fully_labelled < 1) fail("al.initial_fully_labelled must be >= 1");
  if (c.initial_fully_labelled > c.generator.n_train) fail("al.initial_fully_labelled exceeds dataset.n_train");
  if (c.iterations < 0) fail("al.iterations must be >= 0");
  if (c.budget_per_iteration < 1) fail("al.budget_per_iteration must be >= 1");
  if (c.mc_passes < 2) fail("al.mc_passes must be >= 2");
  if (c.seeds.empty()) fail("al.seeds must not be empty");
  const std::size_t K = default_modalities(c.generator.num_classes).size();
  for (const auto& name : c.strategies) {
    const auto key = parse_run_strategy(name);
    if (labels_full_images(key.strategy) && c.budget_per_iteration % K != 0) {
      fail("al.budget_per_iteration must be a multiple of " + std::to_string(K) + " for strategy '" + name + "'");
    }
  }
  if (c.probe_budget % K != 0) fail("al.probe_budget must be a multiple of " + std::to_string(K));
}

std::size_t resolve_jobs(int flag_value) {
  if (flag_value > 0) return static_cast<std::size_t>(flag_value);
  if (const char* env = std::getenv("PARTAL_LAB_JOBS"); env != nullptr && *env != '\0') {
    const auto n = parse_value<long>("PARTAL_LAB_JOBS", env);
    if (n < 1) throw ConfigError("PARTAL_LAB_JOBS must be >= 1");
    return static_cast<std::size_t>(n);
  }
  return 1;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

RunSet run_strategies(const Dataset& dataset, const ExperimentConfig& config,
                      const std::vector<std::string>& strategies, const std::vector<std::uint64_t>& seeds,
                      std::size_t jobs) {
  std::vector<std::string> names = strategies;
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  std::vector<RunKey> keys;
  for (const auto& n : names) keys.push_back(parse_run_strategy(n));
  std::vector<std::uint64_t> seed_list = seeds;
  std::sort(seed_list.begin(), seed_list.end());
  seed_list.erase(std::unique(seed_list.begin(), seed_list.end()), seed_list.end());

  RunSet set;
  set.seeds = seed_list;
  set.full.resize(seed_list.size());
  set.runs.resize(names.size() * seed_list.size());
  const std::size_t n_full = seed_list.size();
  parallel_for(n_full + set.runs.size(), jobs, [&](std::size_t task) {
    if (task < n_full) {
      set.full[task] = run_full_supervision(dataset, config.al_config(seed_list[task])).metrics;
      return;
    }
    const std::size_t r = task - n_full;
    const auto& key = keys[r / seed_list.size()];
    ALConfig al = config.al_config(seed_list[r % seed_list.size()]);
    al.normalize = key.normalize;
    set.runs[r] = run_al(dataset, key.strategy, al);
  });
  for (std::size_t r = 0; r < set.runs.size(); ++r) {
    const auto& ref = set.full[r % seed_list.size()];
    for (auto& it : set.runs[r].iterations) it.metrics.delta_mtl = delta_mtl(it.metrics, ref);
  }
  return set;
}

void write_results_csv(std::ostream& out, const std::vector<ALRunRecord>& runs,
                       const std::vector<ModalitySpec>& modalities) {
  out << "iteration,labels_used,strategy,seed";
  for (const auto& c : metric_columns(modalities)) out << ',' << c;
  out << ",delta_mtl\n";
  std::vector<const ALRunRecord*> order;
  for (const auto& r : runs) order.push_back(&r);
  std::stable_sort(order.begin(), order.end(), [](const ALRunRecord* a, const ALRunRecord* b) {
    if (a->strategy_name != b->strategy_name) return a->strategy_name < b->strategy_name;
    return a->seed < b->seed;
  });
  for (const auto* r : order) {
    for (const auto& it : r->iterations) {
      out << it.iteration << ',' << it.labels_used << ',' << r->strategy_name << ',' << r->seed;
      for (const auto& m : modalities) out << ',' << format_number(it.metrics.at(m.name).value);
      out << ',' << format_number(it.metrics.delta_mtl) << '\n';
    }
  }
}

void write_delta_gap_csv(std::ostream& out, const RunSet& set, const std::vector<ModalitySpec>& modalities) {
  out << "strategy,seed,iteration,labels_used";
  for (const auto& m : modalities) out << ',' << m.name << "_delta";
  out << '\n';
  for (const auto& r : set.runs) {
    const auto pos = std::find(set.seeds.begin(), set.seeds.end(), r.seed) - set.seeds.begin();
    const auto gap = delta_gap(r, set.full[static_cast<std::size_t>(pos)]);
    const auto& last = r.iterations.back();
    out << r.strategy_name << ',' << r.seed << ',' << last.iteration << ',' << last.labels_used;
    for (double g : gap) out << ',' << format_number(g);
    out << '\n';
  }
}

void write_full_supervision_csv(std::ostream& out, const RunSet& set, const std::vector<ModalitySpec>& modalities) {
  out << "seed";
  for (const auto& c : metric_columns(modalities)) out << ',' << c;
  out << '\n';
  for (std::size_t i = 0; i < set.seeds.size(); ++i) {
    out << set.seeds[i];
    for (const auto& m : modalities) out << ',' << format_number(set.full[i].at(m.name).value);
    out << '\n';
  }
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void close_output(std::ofstream& out, const std::filesystem::path& path) {
  out.close();
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

std::filesystem::path write_run_outputs(const RunSet& set, const std::vector<ModalitySpec>& modalities,
                                        const std::filesystem::path& dir, bool emit_plot_data) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "runs", ec);
  if (ec) throw IoError("cannot create " + (dir / "runs").string() + ": " + ec.message());
  for (const auto& run : set.runs) {
    const auto path = dir / "runs" / (run.strategy_name + "_seed" + std::to_string(run.seed) + ".csv");
    auto out = open_output(path);
    write_results_csv(out, {run}, modalities);
    close_output(out, path);
  }
  const auto merged = dir / "results.csv";
  {
    auto out = open_output(merged);
    write_results_csv(out, set.runs, modalities);
    close_output(out, merged);
  }
  {
    const auto path = dir / "delta_gap.csv";
    auto out = open_output(path);
    write_delta_gap_csv(out, set, modalities);
    close_output(out, path);
  }
  {
    const auto path = dir / "full_supervision.csv";
    auto out = open_output(path);
    write_full_supervision_csv(out, set, modalities);
    close_output(out, path);
  }
  if (emit_plot_data) {
    std::ifstream in(merged, std::ios::binary);
    const auto path = dir / "results_long.csv";
    auto out = open_output(path);
    reshape_long(in, out);
    close_output(out, path);
  }
  return merged;
}

void reshape_long(std::istream& in, std::ostream& out) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("results CSV line 1: missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 5 || header[0] != "iteration" || header[1] != "labels_used" || header[2] != "strategy" ||
      header[3] != "seed") {
    throw IoError("results CSV line 1: expected header 'iteration,labels_used,strategy,seed,...'");
  }
  out << "strategy,seed,iteration,labels_used,metric,value\n";
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw IoError("results CSV line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                    " fields, got " + std::to_string(cells.size()));
    }
    try {
      parse_value<long>("iteration", cells[0]);
      parse_value<std::size_t>("labels_used", cells[1]);
      parse_value<std::uint64_t>("seed", cells[3]);
      for (std::size_t c = 4; c < cells.size(); ++c) parse_value<double>(header[c], cells[c]);
    } catch (const ConfigError& e) {
      throw IoError("results CSV line " + std::to_string(line_no) + ": " + e.what());
    }
    for (std::size_t c = 4; c < cells.size(); ++c) {
      out << cells[2] << ',' << cells[3] << ',' << cells[0] << ',' << cells[1] << ',' << header[c] << ','
          << cells[c] << '\n';
    }
  }
}

AblationMode parse_ablation_mode(const std::string& name) {
  if (name == "hardest") return AblationMode::Hardest;
  if (name == "inference") return AblationMode::Inference;
  if (name == "normalization") return AblationMode::Normalization;
  throw ConfigError("unknown ablation mode '" + name + "'; valid: hardest, inference, normalization");
}

namespace {

/// Model trained on the initial labelled set of `seed`, with the aux head so
/// that every strategy can select from it.
struct ProbeState {
  MultiTaskNet net;
  LabelState labels;
};

ProbeState initial_model(const Dataset& dataset, const ALConfig& al) {
  const std::size_t K = dataset.num_modalities();
  LabelState labels(dataset.train.size(), K);
  labels.initial_set = initial_labelled_set(dataset.train.size(), al.initial_fully_labelled, al.seed);
  TrainingPool pool;
  for (auto id : labels.initial_set) {
    for (std::size_t k = 0; k < K; ++k) labels.reveal({id, k});
    pool.samples.push_back(&dataset.train[static_cast<std::size_t>(id)]);
    pool.labelled.push_back(labels.row(static_cast<std::size_t>(id)));
  }
  NetConfig nc = al.net;
  nc.aux_head = true;
  constexpr std::uint64_t kProbeStream = 0x70726f62;
  MultiTaskNet net(NetGeometry::of(dataset), nc, SeededRng(al.seed, kProbeStream));
  TrainConfig tc = al.train;
  tc.seed = mix64(al.seed ^ kProbeStream);
  train(net, pool, tc);
  return {std::move(net), std::move(labels)};
}

}  // namespace

void run_ablation(const Dataset& dataset, const ExperimentConfig& config, AblationMode mode, std::size_t jobs,
                  std::ostream& out) {
  const auto& mods = dataset.modalities;
  switch (mode) {
    case AblationMode::Hardest: {
      out << "seed,strategy,images,pairs";
      for (const auto& c : metric_columns(mods)) out << ',' << c;
      out << '\n';
      if (config.probe_budget == 0) return;
      std::vector<Strategy> strategies;
      for (const auto& name : config.strategies) {
        const auto key = parse_run_strategy(name);
        if (key.normalize && std::find(strategies.begin(), strategies.end(), key.strategy) == strategies.end()) {
          strategies.push_back(key.strategy);
        }
      }
      std::vector<std::vector<HardestRow>> rows(config.seeds.size());
      parallel_for(config.seeds.size(), jobs, [&](std::size_t i) {
        const auto al = config.al_config(config.seeds[i]);
        const auto state = initial_model(dataset, al);
        rows[i] = hardest_examples_probe(state.net, dataset.train, state.labels, strategies, config.probe_budget, al);
      });
      for (std::size_t i = 0; i < config.seeds.size(); ++i) {
        for (const auto& row : rows[i]) {
          out << config.seeds[i] << ',' << row.strategy << ',' << row.images << ',' << row.pairs;
          for (const auto& e : row.metrics) out << ',' << format_number(e.value);
          out << '\n';
        }
      }
      return;
    }
    case AblationMode::Inference: {
      out << "seed,subset_size,provided,target,metric,value\n";
      std::vector<std::vector<InferenceRow>> rows(config.seeds.size());
      parallel_for(config.seeds.size(), jobs, [&](std::size_t i) {
        const auto full = run_full_supervision(dataset, config.al_config(config.seeds[i]));
        rows[i] = partial_inference_probe(full.net, dataset.test);
      });
      for (std::size_t i = 0; i < config.seeds.size(); ++i) {
        for (const auto& row : rows[i]) {
          std::string provided;
          for (auto k : row.provided) provided += (provided.empty() ? "" : "+") + mods[k].name;
          out << config.seeds[i] << ',' << row.provided.size() << ',' << (provided.empty() ? "none" : provided) << ','
              << mods[row.target].name << ',' << to_string(row.metric.kind) << ',' << format_number(row.metric.value)
              << '\n';
        }
      }
      return;
    }
    case AblationMode::Normalization: {
      const auto set = run_strategies(dataset, config, {"partal", kRawPartal}, config.seeds, jobs);
      write_results_csv(out, set.runs, mods);
      return;
    }
  }
}

}  // namespace partal
