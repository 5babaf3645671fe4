// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "actc/harness/config.hpp"
#include "actc/loss.hpp"
#include "actc/tensor.hpp"

namespace actc {

struct Dataset {
  Tensor features;  // [N, per-sample shape...]
  std::vector<int> labels;
  Tensor targets;   // regression data only
  size_t classes = 0;

  size_t size() const { return features.samples(); }
};

struct DataSplit {
  Dataset train, eval;
};

// Gaussian mixture: class c has mean m_c ~ N(0, I), samples m_c + N(0, I).
// Labels cycle through the classes.
Dataset make_synthetic_mixture(uint64_t seed, size_t samples, size_t dims, size_t classes);
// Train and eval drawn from one mixture.
DataSplit make_synthetic_split(uint64_t seed, size_t train, size_t eval, size_t dims,
                               size_t classes);
// Linear regression t = x theta + 0.5 e with x, theta, e standard normal.
DataSplit make_regression_split(uint64_t seed, size_t train, size_t eval, size_t dims);

// IDX image file (magic 0x00000803, unsigned bytes scaled by 1/255) and label
// file (0x00000801). Malformed input throws DataError with the byte offset.
Dataset parse_idx(std::span<const uint8_t> images, std::span<const uint8_t> labels);
Dataset read_idx(const std::string& images_path, const std::string& labels_path);

// Comma-separated numbers per line; the last column is an integer label.
Dataset parse_csv(const std::string& text);
Dataset read_csv(const std::string& path);

DataSplit load_dataset(const TrainConfig& cfg);

Batch make_batch(const Dataset& data, std::span<const size_t> rows);

}  // namespace actc
