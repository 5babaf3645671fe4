// SPDX-License-Identifier: Apache-2.0
#include "actc/harness/sweep.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "actc/harness/levels.hpp"
#include "actc/harness/train.hpp"

namespace actc {

VarianceEstimate level_variance(GraphExecutor& exec, const Batch& probe, Level level,
                                double bits, const TrainConfig& cfg) {
  const LossKind loss = loss_kind(cfg);
  auto alloc = apply_level(exec, level, bits, cfg);
  if (alloc) {
    alloc->begin_step(probe.ids);
    exec.set_step(0x40000000u);
    const Tensor pred = exec.forward(probe.inputs);
    exec.backward(compute_loss(loss, pred, probe).grad);
    alloc->finish_step(exec);
    alloc->begin_step(probe.ids);
  }
  VarianceEstimate v = empirical_variance(exec, probe, loss, cfg.variance_trials, 0x40000001u);
  exec.set_uniform_bits(kMaxBits);
  exec.set_mode(ContextMode::kFullPrecision);
  return v;
}

std::vector<SweepRow> run_bits_sweep(const TrainConfig& cfg, const DataSplit& data) {
  validate_config(cfg);
  const size_t steps_per_epoch = data.train.size() / std::min(cfg.batch_size, data.train.size());
  const size_t total_steps = steps_per_epoch * cfg.epochs;
  const auto checkpoint_steps = size_t(std::llround(cfg.variance_fraction * double(total_steps)));

  // Checkpoint weights: max_steps = 0 would mean "no limit", so an untrained
  // model is built directly.
  std::unique_ptr<GraphExecutor> reference;
  if (checkpoint_steps == 0) {
    reference = std::make_unique<GraphExecutor>(build_model_for(cfg, data.train));
  } else {
    reference = train(cfg, data, Level::kL0, cfg.bits, checkpoint_steps).model;
  }
  reference->set_seed(cfg.seed);
  std::vector<size_t> rows;
  for (size_t i = 0; i < std::min(cfg.batch_size, data.train.size()); ++i) rows.push_back(i);
  const Batch probe = make_batch(data.train, rows);

  std::vector<SweepRow> out;
  for (Level level : cfg.sweep_levels) {
    for (double bits : cfg.sweep_bits) {
      const bool integral = bits == std::floor(bits);
      if (!integral && level != Level::kL2_5 && level != Level::kL3) continue;
      SweepRow row;
      row.level = level;
      row.bits = bits;
      const TrainResult run = train(cfg, data, level, bits);
      row.final_loss = run.final_loss;
      row.eval_loss = run.final_eval.loss;
      row.eval_accuracy = run.final_eval.accuracy.value_or(0.0);
      const VarianceEstimate v = level_variance(*reference, probe, level, bits, cfg);
      row.variance = v.total();
      row.variance_se = v.total_std_error();
      out.push_back(row);
    }
  }
  return out;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "level,bits,final_loss,eval_loss,eval_accuracy,grad_variance,grad_variance_se\n";
  for (const auto& r : rows) {
    os << to_string(r.level) << ',' << r.bits << ',' << r.final_loss << ',' << r.eval_loss << ','
       << r.eval_accuracy << ',' << r.variance << ',' << r.variance_se << '\n';
  }
  return os.str();
}

}  // namespace actc
