// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "actc/executor.hpp"
#include "actc/harness/config.hpp"
#include "actc/harness/dataset.hpp"
#include "actc/loss.hpp"

namespace actc {

struct MetricsRow {
  size_t step = 0;
  size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> eval_loss;
  std::optional<double> eval_accuracy;
  std::optional<double> grad_variance;
  double avg_bits = 32.0;                // payload bits per compressed element
  double avg_bits_with_metadata = 32.0;  // plus per-group R, Z
  std::optional<double> wall_time_s;
};

// Append-only; steps must increase.
class MetricsLog {
 public:
  void append(const MetricsRow& row);
  const std::vector<MetricsRow>& rows() const { return rows_; }
  std::string to_csv() const;

 private:
  std::vector<MetricsRow> rows_;
};

struct EvalResult {
  double loss = 0.0;
  std::optional<double> accuracy;
};

LossKind loss_kind(const TrainConfig& cfg);

// Forward-only pass over the dataset in full-precision mode, 256 rows at a
// time. Restores the executor's mode.
EvalResult evaluate(GraphExecutor& exec, const Dataset& data, LossKind loss);

struct TrainResult {
  MetricsLog log;
  std::unique_ptr<GraphExecutor> model;
  EvalResult final_eval;
  // Mean train loss over the last tenth of the steps.
  double final_loss = 0.0;
};

// Minibatch SGD with the configured level. Batches are drawn from a per-epoch
// shuffle; a trailing partial batch is dropped. Stops after `max_steps` steps
// when nonzero. Throws ConfigError on an unusable model or budget.
TrainResult train(const TrainConfig& cfg, const DataSplit& data, size_t max_steps = 0);
TrainResult train(const TrainConfig& cfg, const DataSplit& data, Level level, double bits,
                  size_t max_steps = 0);

// Deterministic Fisher-Yates permutation of [0, n).
std::vector<size_t> shuffled_rows(size_t n, uint64_t seed);

// Per-sample input shape of the dataset, and its output width.
Shape sample_shape(const Dataset& d);
size_t output_width(const Dataset& d);

GraphExecutor build_model_for(const TrainConfig& cfg, const Dataset& d);

}  // namespace actc
