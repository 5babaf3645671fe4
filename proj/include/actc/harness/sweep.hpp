// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "actc/executor.hpp"
#include "actc/harness/config.hpp"
#include "actc/harness/dataset.hpp"
#include "actc/variance.hpp"

namespace actc {

// Gradient variance of a level at fixed weights on a probe batch. One
// compressed step on the probe warms the estimator and, for L3, sets the
// stage-2 layer budgets before the trials. Leaves the executor in
// full-precision mode.
VarianceEstimate level_variance(GraphExecutor& exec, const Batch& probe, Level level,
                                double bits, const TrainConfig& cfg);

struct SweepRow {
  Level level = Level::kL2;
  double bits = 2.0;
  double final_loss = 0.0;
  double eval_loss = 0.0;
  double eval_accuracy = 0.0;
  double variance = 0.0;
  double variance_se = 0.0;
};

// Trains one run per (level, bits) and measures each setting's gradient
// variance at a shared checkpoint: the full-precision run's weights after
// variance_fraction of training, on the first batch_size training rows.
// Integer-only levels skip non-integer bits.
std::vector<SweepRow> run_bits_sweep(const TrainConfig& cfg, const DataSplit& data);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace actc
