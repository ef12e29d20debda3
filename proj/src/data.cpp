#include "partal/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "container.hpp"

namespace partal {

std::string to_string(ModalityKind kind) {
  return kind == ModalityKind::Categorical ? "categorical" : "continuous";
}

std::string to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::MIoU: return "miou";
    case MetricKind::RMSE: return "rmse";
    case MetricKind::MeanAngleError: return "mean_angle_error";
  }
  return "unknown";
}

namespace {

ModalityKind parse_kind(const std::string& s) {
  if (s == "categorical") return ModalityKind::Categorical;
  if (s == "continuous") return ModalityKind::Continuous;
  throw DatasetError(DatasetErrorKind::Format, "unknown modality kind '" + s + "'");
}

MetricKind parse_metric(const std::string& s) {
  if (s == "miou") return MetricKind::MIoU;
  if (s == "rmse") return MetricKind::RMSE;
  if (s == "mean_angle_error") return MetricKind::MeanAngleError;
  throw DatasetError(DatasetErrorKind::Format, "unknown metric '" + s + "'");
}

}  // namespace

ModalitySpec ModalitySpec::categorical(std::string name, std::size_t num_classes,
                                       double loss_weight) {
  ModalitySpec spec{std::move(name), ModalityKind::Categorical, num_classes, loss_weight,
                    MetricKind::MIoU, true};
  spec.validate();
  return spec;
}

ModalitySpec ModalitySpec::continuous(std::string name, std::size_t dim, double loss_weight,
                                      MetricKind metric) {
  ModalitySpec spec{std::move(name), ModalityKind::Continuous, dim, loss_weight, metric, false};
  spec.validate();
  return spec;
}

void ModalitySpec::validate() const {
  if (name.empty()) throw std::invalid_argument("modality name must not be empty");
  if (!(loss_weight > 0.0)) throw std::invalid_argument("modality '" + name + "': loss_weight must be > 0");
  if (is_categorical()) {
    if (channels < 2) throw std::invalid_argument("modality '" + name + "': need >= 2 classes");
    if (metric != MetricKind::MIoU) {
      throw std::invalid_argument("modality '" + name + "': categorical modalities use mIoU");
    }
  } else {
    if (channels < 1) throw std::invalid_argument("modality '" + name + "': dim must be >= 1");
    if (metric == MetricKind::MIoU) {
      throw std::invalid_argument("modality '" + name + "': mIoU requires a categorical modality");
    }
    if (metric == MetricKind::MeanAngleError && channels != 3) {
      throw std::invalid_argument("modality '" + name + "': angle error requires dim 3");
    }
  }
}

std::vector<ModalitySpec> default_modalities(std::size_t num_classes) {
  return {
      ModalitySpec::continuous("depth", 1, 1.0, MetricKind::RMSE),
      ModalitySpec::continuous("normals", 3, 10.0, MetricKind::MeanAngleError),
      ModalitySpec::categorical("segmentation", num_classes, 1.0),
  };
}

std::array<double, 3> light_direction() {
  const double s = std::sqrt(6.0);
  return {1.0 / s, 1.0 / s, 2.0 / s};
}

Tensor normals_from_depth(const Tensor& depth, double spacing) {
  if (depth.rank() != 2 || depth.shape[0] < 2 || depth.shape[1] < 2) {
    throw std::invalid_argument("normals_from_depth: depth must be [H, W] with H, W >= 2");
  }
  const std::size_t h = depth.shape[0], w = depth.shape[1];
  Tensor normals({3, h, w});
  auto z = [&](std::size_t y, std::size_t x) { return depth.data[y * w + x]; };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double dzdx, dzdy;
      if (x == 0) dzdx = (z(y, 1) - z(y, 0)) / spacing;
      else if (x == w - 1) dzdx = (z(y, w - 1) - z(y, w - 2)) / spacing;
      else dzdx = (z(y, x + 1) - z(y, x - 1)) / (2.0 * spacing);
      if (y == 0) dzdy = (z(1, x) - z(0, x)) / spacing;
      else if (y == h - 1) dzdy = (z(h - 1, x) - z(h - 2, x)) / spacing;
      else dzdy = (z(y + 1, x) - z(y - 1, x)) / (2.0 * spacing);
      const double nx = -dzdx, ny = -dzdy, nz = 1.0;
      const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
      const std::size_t p = y * w + x;
      normals.data[p] = nx / len;
      normals.data[h * w + p] = ny / len;
      normals.data[2 * h * w + p] = nz / len;
    }
  }
  return normals;
}

Tensor quantile_segmentation(const Tensor& depth, std::size_t num_classes) {
  const std::size_t n = depth.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (depth.data[a] != depth.data[b]) return depth.data[a] < depth.data[b];
    return a < b;
  });
  Tensor classes(depth.shape);
  for (std::size_t rank = 0; rank < n; ++rank) {
    classes.data[order[rank]] = static_cast<double>(rank * num_classes / n);
  }
  return classes;
}

namespace {

SampleRecord generate_scene(const GeneratorConfig& cfg, SeededRng rng, std::int64_t id) {
  const std::size_t h = cfg.height, w = cfg.width;
  const double extent = static_cast<double>(std::min(h, w));
  Tensor depth({h, w});
  for (std::size_t b = 0; b < cfg.num_bumps; ++b) {
    const double cx = rng.uniform() * static_cast<double>(w - 1);
    const double cy = rng.uniform() * static_cast<double>(h - 1);
    const double amplitude = 0.5 + 1.5 * rng.uniform();
    const double width = (0.15 + 0.25 * rng.uniform()) * extent;
    const double inv = 1.0 / (2.0 * width * width);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        depth.data[y * w + x] += amplitude * std::exp(-(dx * dx + dy * dy) * inv);
      }
    }
  }
  Tensor normals = normals_from_depth(depth, 1.0);
  Tensor segmentation = quantile_segmentation(depth, cfg.num_classes);

  const auto light = light_direction();
  Tensor image({1, h, w});
  const std::size_t p_count = h * w;
  for (std::size_t p = 0; p < p_count; ++p) {
    const double shade = normals.data[p] * light[0] + normals.data[p_count + p] * light[1] +
                         normals.data[2 * p_count + p] * light[2];
    image.data[p] = std::max(0.0, shade);
  }
  if (cfg.noise_std > 0.0) {
    for (double& v : image.data) v += cfg.noise_std * rng.normal();
  }

  SampleRecord record;
  record.sample_id = id;
  record.input = std::move(image);
  depth.shape = {1, h, w};
  record.targets = {std::move(depth), std::move(normals), std::move(segmentation)};
  return record;
}

}  // namespace

Dataset generate_dataset(const GeneratorConfig& cfg, std::uint64_t seed) {
  if (cfg.height < 4 || cfg.width < 4) throw std::invalid_argument("generate_dataset: H, W must be >= 4");
  if (cfg.num_bumps < 1) throw std::invalid_argument("generate_dataset: num_bumps must be >= 1");
  if (cfg.num_classes < 2) throw std::invalid_argument("generate_dataset: num_classes must be >= 2");
  if (cfg.num_classes > cfg.height * cfg.width) {
    throw std::invalid_argument("generate_dataset: more classes than pixels");
  }
  if (!(cfg.noise_std >= 0.0) || !std::isfinite(cfg.noise_std)) {
    throw std::invalid_argument("generate_dataset: noise_std must be finite and >= 0");
  }
  if (cfg.n_train < 1) throw std::invalid_argument("generate_dataset: n_train must be >= 1");

  Dataset ds;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.input_channels = 1;
  ds.modalities = default_modalities(cfg.num_classes);
  ds.generator_seed = seed;
  const SeededRng root(seed, 0);
  const SeededRng train_rng = root.split(1), test_rng = root.split(2);
  ds.train.reserve(cfg.n_train);
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    ds.train.push_back(generate_scene(cfg, train_rng.split(i), static_cast<std::int64_t>(i)));
  }
  ds.test.reserve(cfg.n_test);
  for (std::size_t i = 0; i < cfg.n_test; ++i) {
    ds.test.push_back(generate_scene(cfg, test_rng.split(i), static_cast<std::int64_t>(i)));
  }
  return ds;
}

std::filesystem::path manifest_path(const std::filesystem::path& stem) {
  auto p = stem;
  p += ".manifest";
  return p;
}

std::filesystem::path blob_path(const std::filesystem::path& stem) {
  auto p = stem;
  p += ".blob";
  return p;
}

namespace {

std::size_t record_length(const Dataset& ds) {
  std::size_t n = ds.input_dim();
  for (const auto& m : ds.modalities) n += (m.is_categorical() ? 1 : m.channels) * ds.pixels();
  return n;
}

std::vector<std::size_t> target_shape(const Dataset& ds, const ModalitySpec& m) {
  if (m.is_categorical()) return {ds.height, ds.width};
  return {m.channels, ds.height, ds.width};
}

void check_record(const Dataset& ds, const SampleRecord& r, const std::string& where) {
  auto fail = [&](const std::string& msg) {
    throw DatasetError(DatasetErrorKind::InvariantViolation, where + ": " + msg);
  };
  if (r.input.shape != std::vector<std::size_t>{ds.input_channels, ds.height, ds.width}) {
    fail("input shape mismatch");
  }
  if (!r.input.all_finite()) fail("non-finite input");
  if (r.targets.size() != ds.modalities.size()) fail("wrong number of targets");
  for (std::size_t k = 0; k < ds.modalities.size(); ++k) {
    const auto& m = ds.modalities[k];
    const auto& t = r.targets[k];
    if (t.shape != target_shape(ds, m)) fail("target '" + m.name + "' shape mismatch");
    if (!t.all_finite()) fail("target '" + m.name + "' not finite");
    if (m.is_categorical()) {
      for (double v : t.data) {
        if (v != std::floor(v) || v < 0.0 || v >= static_cast<double>(m.channels)) {
          fail("categorical '" + m.name + "' value " + std::to_string(v) + " outside [0, " +
               std::to_string(m.channels) + ")");
        }
      }
    } else if (m.metric == MetricKind::MeanAngleError) {
      const std::size_t p = ds.pixels();
      for (std::size_t i = 0; i < p; ++i) {
        const double a = t.data[i], b = t.data[p + i], c = t.data[2 * p + i];
        if (std::abs(std::sqrt(a * a + b * b + c * c) - 1.0) > 1e-6) {
          fail("normal vector of '" + m.name + "' not unit length");
        }
      }
    }
  }
}

}  // namespace

void validate_dataset(const Dataset& ds) {
  for (const auto& m : ds.modalities) {
    try {
      m.validate();
    } catch (const std::invalid_argument& e) {
      throw DatasetError(DatasetErrorKind::InvariantViolation, e.what());
    }
  }
  for (std::size_t i = 0; i < ds.train.size(); ++i) check_record(ds, ds.train[i], "train[" + std::to_string(i) + "]");
  for (std::size_t i = 0; i < ds.test.size(); ++i) check_record(ds, ds.test[i], "test[" + std::to_string(i) + "]");
}

void save_dataset(const Dataset& ds, const std::filesystem::path& stem) {
  validate_dataset(ds);
  nlohmann::json header;
  header["format"] = "partal-dataset";
  header["version"] = kDatasetFormatVersion;
  header["height"] = ds.height;
  header["width"] = ds.width;
  header["input_channels"] = ds.input_channels;
  header["generator_seed"] = ds.generator_seed;
  header["num_train"] = ds.train.size();
  header["num_test"] = ds.test.size();
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : ds.modalities) {
    mods.push_back({{"name", m.name},
                    {"kind", to_string(m.kind)},
                    {"channels", m.channels},
                    {"loss_weight", m.loss_weight},
                    {"metric", to_string(m.metric)},
                    {"higher_is_better", m.higher_is_better}});
  }
  header["modalities"] = mods;

  const std::size_t stride = record_length(ds);
  std::vector<double> blob;
  blob.reserve(stride * (ds.train.size() + ds.test.size()));
  nlohmann::json offsets = nlohmann::json::array();
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& r : *split) {
      offsets.push_back(blob.size() * 8);
      blob.insert(blob.end(), r.input.data.begin(), r.input.data.end());
      for (const auto& t : r.targets) blob.insert(blob.end(), t.data.begin(), t.data.end());
    }
  }
  header["blob_offsets"] = offsets;
  header["blob_bytes"] = blob.size() * 8;
  container::write(manifest_path(stem), blob_path(stem), header, blob);
}

Dataset load_dataset(const std::filesystem::path& stem) {
  const auto header = container::read_manifest(manifest_path(stem));
  Dataset ds;
  std::vector<std::size_t> offsets;
  std::size_t num_train = 0, num_test = 0, blob_bytes = 0;
  try {
    if (header.at("format").get<std::string>() != "partal-dataset") {
      throw DatasetError(DatasetErrorKind::Format, "manifest is not a dataset manifest");
    }
    const int version = header.at("version").get<int>();
    if (version != kDatasetFormatVersion) {
      throw DatasetError(DatasetErrorKind::VersionMismatch,
                         "dataset version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kDatasetFormatVersion) + ")");
    }
    ds.height = header.at("height").get<std::size_t>();
    ds.width = header.at("width").get<std::size_t>();
    ds.input_channels = header.at("input_channels").get<std::size_t>();
    ds.generator_seed = header.at("generator_seed").get<std::uint64_t>();
    num_train = header.at("num_train").get<std::size_t>();
    num_test = header.at("num_test").get<std::size_t>();
    for (const auto& m : header.at("modalities")) {
      ModalitySpec spec;
      spec.name = m.at("name").get<std::string>();
      spec.kind = parse_kind(m.at("kind").get<std::string>());
      spec.channels = m.at("channels").get<std::size_t>();
      spec.loss_weight = m.at("loss_weight").get<double>();
      spec.metric = parse_metric(m.at("metric").get<std::string>());
      spec.higher_is_better = m.at("higher_is_better").get<bool>();
      ds.modalities.push_back(std::move(spec));
    }
    offsets = header.at("blob_offsets").get<std::vector<std::size_t>>();
    blob_bytes = header.at("blob_bytes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(DatasetErrorKind::Format, std::string("dataset manifest: ") + e.what());
  }

  const std::size_t stride = record_length(ds);
  const std::size_t total = num_train + num_test;
  if (offsets.size() != total) {
    throw DatasetError(DatasetErrorKind::Format, "dataset manifest: offset count mismatch");
  }
  for (std::size_t i = 0; i < total; ++i) {
    if (offsets[i] != i * stride * 8 || (i > 0 && offsets[i] <= offsets[i - 1])) {
      throw DatasetError(DatasetErrorKind::Format, "dataset manifest: inconsistent blob offsets");
    }
  }
  if (blob_bytes != total * stride * 8) {
    throw DatasetError(DatasetErrorKind::Format, "dataset manifest: blob size inconsistent with shapes");
  }
  const auto blob = container::read_blob(blob_path(stem), total * stride);

  auto read_record = [&](std::size_t index, std::int64_t id) {
    SampleRecord r;
    r.sample_id = id;
    auto it = blob.begin() + static_cast<std::ptrdiff_t>(index * stride);
    auto take = [&](std::vector<std::size_t> shape) {
      const auto n = Tensor::element_count(shape);
      Tensor t(std::move(shape), std::vector<double>(it, it + static_cast<std::ptrdiff_t>(n)));
      it += static_cast<std::ptrdiff_t>(n);
      return t;
    };
    r.input = take({ds.input_channels, ds.height, ds.width});
    for (const auto& m : ds.modalities) r.targets.push_back(take(target_shape(ds, m)));
    return r;
  };
  for (std::size_t i = 0; i < num_train; ++i) ds.train.push_back(read_record(i, static_cast<std::int64_t>(i)));
  for (std::size_t i = 0; i < num_test; ++i) ds.test.push_back(read_record(num_train + i, static_cast<std::int64_t>(i)));
  validate_dataset(ds);
  return ds;
}

}  // namespace partal
