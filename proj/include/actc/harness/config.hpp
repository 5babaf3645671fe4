// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "actc/allocator.hpp"
#include "actc/layers.hpp"

namespace actc {

// Exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Level { kL0, kL1, kL2, kL2_5, kL3 };

std::string to_string(Level level);
Level parse_level(const std::string& text);  // "L2.5" or "2.5"

struct TrainConfig {
  // Preset name (mlp, cnn, block, quadratic) or an explicit layer list such
  // as "conv(1,8,3,1,1) bn(8) relu maxpool(2,2) linear(128,10)".
  std::string model = "mlp";
  std::string loss = "xent";  // xent | mse
  // Per-sample shape the features are reshaped to, e.g. "1,8,8".
  std::string input_shape;

  std::string dataset = "synthetic";  // synthetic | regression | idx | csv
  std::string train_images, train_labels, eval_images, eval_labels;
  std::string train_csv, eval_csv;
  size_t train_limit = 0;  // keep only the first rows of the training file
  size_t synthetic_samples = 512;
  size_t synthetic_eval = 256;
  size_t synthetic_dims = 16;
  size_t synthetic_classes = 4;
  uint64_t data_seed = 7;

  Level level = Level::kL0;
  double bits = 2.0;
  uint32_t group_size = kDefaultGroupSize;
  double learning_rate = 0.05;
  size_t epochs = 1;
  size_t batch_size = 32;
  uint64_t seed = 0;
  EstimatorMode estimator = EstimatorMode::kStale;
  double ema_decay = 0.9;
  bool normalize_greedy = true;
  BatchNormMode bn_mode = BatchNormMode::kSingleCopy;

  unsigned threads = 1;
  size_t eval_every = 0;        // steps; 0 evaluates at the end of each epoch
  size_t variance_every = 0;    // steps; 0 disables the per-step snapshot
  size_t variance_trials = 100;
  double variance_fraction = 0.5;  // sweep checkpoint, fraction of training
  size_t variance_batches = 100;   // profile-variance resampled batches
  bool log_wall_time = false;

  std::vector<double> sweep_bits = {1, 1.25, 1.5, 1.75, 2, 2.5, 3, 4};
  std::vector<Level> sweep_levels = {Level::kL2, Level::kL2_5, Level::kL3};
};

// Line-oriented "key = value" text with '#' comments. Unknown keys, bad
// values, and inconsistent settings raise ConfigError naming the line.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);

// Applies one "key = value" setting.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
// Throws ConfigError on inconsistent settings.
void validate_config(const TrainConfig& cfg);

std::vector<double> parse_number_list(const std::string& text);

}  // namespace actc
