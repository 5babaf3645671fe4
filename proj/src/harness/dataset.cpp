// SPDX-License-Identifier: Apache-2.0
#include "actc/harness/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace actc {

namespace {

void finalize_classes(Dataset& d) {
  int top = -1;
  for (int y : d.labels) top = std::max(top, y);
  d.classes = size_t(top + 1);
}

Dataset take_rows(const Dataset& src, size_t first, size_t count) {
  Dataset d;
  const size_t width = src.features.sample_size();
  Shape shape = src.features.shape();
  shape[0] = count;
  const auto f = src.features.data();
  d.features = Tensor(shape, std::vector<float>(f.begin() + first * width,
                                                f.begin() + (first + count) * width));
  if (!src.labels.empty()) {
    d.labels.assign(src.labels.begin() + first, src.labels.begin() + first + count);
  }
  if (!src.targets.empty()) {
    const size_t tw = src.targets.sample_size();
    Shape ts = src.targets.shape();
    ts[0] = count;
    const auto t = src.targets.data();
    d.targets = Tensor(ts, std::vector<float>(t.begin() + first * tw,
                                              t.begin() + (first + count) * tw));
  }
  d.classes = src.classes;
  return d;
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), {});
}

uint32_t read_be32(std::span<const uint8_t> b, size_t off, const char* what) {
  if (off + 4 > b.size()) {
    throw DataError(std::string(what) + ": truncated header at byte " + std::to_string(off));
  }
  return uint32_t(b[off]) << 24 | uint32_t(b[off + 1]) << 16 | uint32_t(b[off + 2]) << 8 |
         uint32_t(b[off + 3]);
}

// Returns dims and the offset of the first data byte.
std::vector<uint32_t> idx_header(std::span<const uint8_t> b, uint32_t magic, const char* what,
                                 size_t& data_offset) {
  const uint32_t got = read_be32(b, 0, what);
  if (got != magic) {
    std::ostringstream os;
    os << what << ": bad magic 0x" << std::hex << got << " at byte 0 (expected 0x" << magic << ")";
    throw DataError(os.str());
  }
  const size_t ndims = magic & 0xff;
  std::vector<uint32_t> dims;
  for (size_t i = 0; i < ndims; ++i) {
    dims.push_back(read_be32(b, 4 + 4 * i, what));
    if (dims.back() == 0) {
      throw DataError(std::string(what) + ": zero dimension at byte " + std::to_string(4 + 4 * i));
    }
  }
  data_offset = 4 + 4 * ndims;
  uint64_t count = 1;
  for (uint32_t d : dims) count *= d;
  if (b.size() < data_offset + count) {
    throw DataError(std::string(what) + ": data truncated at byte " + std::to_string(b.size()) +
                    " (expected " + std::to_string(data_offset + count) + " bytes)");
  }
  if (b.size() > data_offset + count) {
    throw DataError(std::string(what) + ": trailing bytes from byte " +
                    std::to_string(data_offset + count));
  }
  return dims;
}

}  // namespace

Dataset make_synthetic_mixture(uint64_t seed, size_t samples, size_t dims, size_t classes) {
  if (samples == 0 || dims == 0 || classes < 2) {
    throw ConfigError("synthetic data needs samples > 0, dims > 0, classes >= 2");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> means(classes * dims);
  for (auto& m : means) m = normal(rng);
  Dataset d;
  d.features = Tensor({samples, dims});
  d.labels.resize(samples);
  for (size_t n = 0; n < samples; ++n) {
    const size_t c = n % classes;
    d.labels[n] = int(c);
    auto x = d.features.sample(n);
    for (size_t i = 0; i < dims; ++i) x[i] = float(means[c * dims + i] + normal(rng));
  }
  d.classes = classes;
  return d;
}

DataSplit make_synthetic_split(uint64_t seed, size_t train, size_t eval, size_t dims,
                               size_t classes) {
  const Dataset all = make_synthetic_mixture(seed, train + eval, dims, classes);
  return {take_rows(all, 0, train), take_rows(all, train, eval)};
}

DataSplit make_regression_split(uint64_t seed, size_t train, size_t eval, size_t dims) {
  if (train == 0 || eval == 0 || dims == 0) throw ConfigError("regression data needs sizes > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> theta(dims);
  for (auto& t : theta) t = normal(rng);
  Dataset all;
  const size_t n_all = train + eval;
  all.features = Tensor({n_all, dims});
  all.targets = Tensor({n_all, 1});
  for (size_t n = 0; n < n_all; ++n) {
    auto x = all.features.sample(n);
    double y = 0.0;
    for (size_t i = 0; i < dims; ++i) {
      x[i] = float(normal(rng));
      y += x[i] * theta[i];
    }
    all.targets[n] = float(y + 0.5 * normal(rng));
  }
  return {take_rows(all, 0, train), take_rows(all, train, eval)};
}

Dataset parse_idx(std::span<const uint8_t> images, std::span<const uint8_t> labels) {
  size_t img_off = 0, lab_off = 0;
  const auto idims = idx_header(images, 0x00000803, "idx images", img_off);
  const auto ldims = idx_header(labels, 0x00000801, "idx labels", lab_off);
  if (idims[0] != ldims[0]) {
    throw DataError("idx: " + std::to_string(idims[0]) + " images but " +
                    std::to_string(ldims[0]) + " labels (label count at byte 4)");
  }
  Dataset d;
  d.features = Tensor({idims[0], idims[1], idims[2]});
  const auto f = d.features.data();
  for (size_t k = 0; k < f.size(); ++k) f[k] = float(images[img_off + k]) / 255.0f;
  d.labels.resize(ldims[0]);
  for (size_t n = 0; n < d.labels.size(); ++n) d.labels[n] = labels[lab_off + n];
  finalize_classes(d);
  return d;
}

Dataset read_idx(const std::string& images_path, const std::string& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  try {
    return parse_idx(images, labels);
  } catch (const DataError& e) {
    throw DataError(images_path + " / " + labels_path + ": " + e.what());
  }
}

Dataset parse_csv(const std::string& text) {
  std::vector<float> values;
  std::vector<int> labels;
  size_t width = 0;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    size_t line_end = end;
    if (line_end > pos && text[line_end - 1] == '\r') --line_end;
    if (line_end > pos) {
      std::vector<float> row;
      size_t field = pos;
      while (true) {
        size_t comma = text.find(',', field);
        if (comma == std::string::npos || comma > line_end) comma = line_end;
        const char* b = text.data() + field;
        const char* e = text.data() + comma;
        while (b < e && *b == ' ') ++b;
        while (e > b && e[-1] == ' ') --e;
        float v = 0.0f;
        const auto [p, ec] = std::from_chars(b, e, v);
        if (ec != std::errc() || p != e || !std::isfinite(v)) {
          throw DataError("csv: malformed number at byte " + std::to_string(field));
        }
        row.push_back(v);
        if (comma == line_end) break;
        field = comma + 1;
      }
      if (row.size() < 2) {
        throw DataError("csv: row at byte " + std::to_string(pos) + " needs features and a label");
      }
      if (width == 0) width = row.size() - 1;
      if (row.size() - 1 != width) {
        throw DataError("csv: row at byte " + std::to_string(pos) + " has " +
                        std::to_string(row.size()) + " columns, expected " +
                        std::to_string(width + 1));
      }
      const float label = row.back();
      if (label < 0.0f || label != std::floor(label)) {
        throw DataError("csv: label at row byte " + std::to_string(pos) +
                        " is not a nonnegative integer");
      }
      labels.push_back(int(label));
      values.insert(values.end(), row.begin(), row.end() - 1);
    }
    pos = end + 1;
  }
  if (labels.empty()) throw DataError("csv: no rows");
  Dataset d;
  d.features = Tensor({labels.size(), width}, std::move(values));
  d.labels = std::move(labels);
  finalize_classes(d);
  return d;
}

Dataset read_csv(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return parse_csv(std::string(bytes.begin(), bytes.end()));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

DataSplit load_dataset(const TrainConfig& cfg) {
  DataSplit split;
  if (cfg.dataset == "synthetic") {
    split = make_synthetic_split(cfg.data_seed, cfg.synthetic_samples, cfg.synthetic_eval,
                                 cfg.synthetic_dims, cfg.synthetic_classes);
  } else if (cfg.dataset == "regression") {
    split = make_regression_split(cfg.data_seed, cfg.synthetic_samples, cfg.synthetic_eval,
                                  cfg.synthetic_dims);
  } else if (cfg.dataset == "idx") {
    if (cfg.train_images.empty() || cfg.train_labels.empty()) {
      throw ConfigError("idx dataset needs train_images and train_labels");
    }
    split.train = read_idx(cfg.train_images, cfg.train_labels);
    if (!cfg.eval_images.empty()) split.eval = read_idx(cfg.eval_images, cfg.eval_labels);
  } else if (cfg.dataset == "csv") {
    if (cfg.train_csv.empty()) throw ConfigError("csv dataset needs train_csv");
    split.train = read_csv(cfg.train_csv);
    if (!cfg.eval_csv.empty()) split.eval = read_csv(cfg.eval_csv);
  } else {
    throw ConfigError("unknown dataset '" + cfg.dataset + "'");
  }
  if (cfg.train_limit > 0 && cfg.train_limit < split.train.size()) {
    split.train = take_rows(split.train, 0, cfg.train_limit);
  }
  if (split.eval.size() == 0) split.eval = split.train;
  const size_t classes = std::max(split.train.classes, split.eval.classes);
  split.train.classes = split.eval.classes = classes;

  if (!cfg.input_shape.empty()) {
    Shape s;
    for (double v : parse_number_list(cfg.input_shape)) {
      if (v < 1 || v != std::floor(v)) throw ConfigError("input_shape needs positive integers");
      s.push_back(size_t(v));
    }
    for (Dataset* d : {&split.train, &split.eval}) {
      Shape full = s;
      full.insert(full.begin(), d->size());
      if (shape_numel(full) != d->features.numel()) {
        throw ConfigError("input_shape " + cfg.input_shape + " does not match " +
                          std::to_string(d->features.sample_size()) + " features per sample");
      }
      d->features = d->features.reshaped(full);
    }
  }
  return split;
}

Batch make_batch(const Dataset& data, std::span<const size_t> rows) {
  Batch b;
  const size_t width = data.features.sample_size();
  Shape shape = data.features.shape();
  shape[0] = rows.size();
  std::vector<float> x;
  x.reserve(rows.size() * width);
  for (size_t r : rows) {
    auto s = data.features.sample(r);
    x.insert(x.end(), s.begin(), s.end());
  }
  b.inputs = Tensor(shape, std::move(x));
  if (!data.targets.empty()) {
    Shape ts = data.targets.shape();
    ts[0] = rows.size();
    std::vector<float> t;
    for (size_t r : rows) {
      auto s = data.targets.sample(r);
      t.insert(t.end(), s.begin(), s.end());
    }
    b.targets = Tensor(ts, std::move(t));
  }
  for (size_t r : rows) {
    if (!data.labels.empty()) b.labels.push_back(data.labels[r]);
    b.ids.push_back(r);
  }
  return b;
}

}  // namespace actc
