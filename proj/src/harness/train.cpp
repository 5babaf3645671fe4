// SPDX-License-Identifier: Apache-2.0
#include "actc/harness/train.hpp"

#include <chrono>
#include <iomanip>
#include <random>
#include <sstream>

#include "actc/harness/levels.hpp"
#include "actc/harness/model.hpp"
#include "actc/variance.hpp"

namespace actc {

void MetricsLog::append(const MetricsRow& row) {
  if (!rows_.empty() && row.step <= rows_.back().step) {
    throw std::logic_error("metrics: step " + std::to_string(row.step) + " after step " +
                           std::to_string(rows_.back().step));
  }
  rows_.push_back(row);
}

std::string MetricsLog::to_csv() const {
  const bool wall = !rows_.empty() && rows_.front().wall_time_s.has_value();
  std::ostringstream os;
  os << std::setprecision(9);
  os << "step,epoch,train_loss,eval_loss,eval_accuracy,grad_variance,avg_bits,"
        "avg_bits_with_metadata";
  if (wall) os << ",wall_time_s";
  os << '\n';
  auto opt = [&os](const std::optional<double>& v) {
    os << ',';
    if (v) os << *v;
  };
  for (const auto& r : rows_) {
    os << r.step << ',' << r.epoch << ',' << r.train_loss;
    opt(r.eval_loss);
    opt(r.eval_accuracy);
    opt(r.grad_variance);
    os << ',' << r.avg_bits << ',' << r.avg_bits_with_metadata;
    if (wall) opt(r.wall_time_s);
    os << '\n';
  }
  return os.str();
}

LossKind loss_kind(const TrainConfig& cfg) {
  return cfg.loss == "mse" ? LossKind::kMeanSquaredError : LossKind::kCrossEntropy;
}

EvalResult evaluate(GraphExecutor& exec, const Dataset& data, LossKind loss) {
  const ContextMode saved = exec.mode();
  exec.set_mode(ContextMode::kFullPrecision);
  EvalResult r;
  double loss_sum = 0.0, hits = 0.0;
  constexpr size_t kChunk = 256;
  std::vector<size_t> rows;
  for (size_t first = 0; first < data.size(); first += kChunk) {
    rows.clear();
    for (size_t i = first; i < std::min(first + kChunk, data.size()); ++i) rows.push_back(i);
    const Batch b = make_batch(data, rows);
    const Tensor pred = exec.forward(b.inputs);
    loss_sum += compute_loss(loss, pred, b).loss * double(rows.size());
    if (loss == LossKind::kCrossEntropy) hits += accuracy(pred, b.labels) * double(rows.size());
  }
  exec.release_contexts();
  exec.set_mode(saved);
  r.loss = loss_sum / double(data.size());
  if (loss == LossKind::kCrossEntropy) r.accuracy = hits / double(data.size());
  return r;
}

std::vector<size_t> shuffled_rows(size_t n, uint64_t seed) {
  std::vector<size_t> rows(n);
  for (size_t i = 0; i < n; ++i) rows[i] = i;
  std::mt19937_64 rng(seed);
  for (size_t i = n; i > 1; --i) std::swap(rows[i - 1], rows[rng() % i]);
  return rows;
}

Shape sample_shape(const Dataset& d) {
  Shape s = d.features.shape();
  s.erase(s.begin());
  return s;
}

size_t output_width(const Dataset& d) {
  return d.targets.empty() ? d.classes : d.targets.sample_size();
}

GraphExecutor build_model_for(const TrainConfig& cfg, const Dataset& d) {
  return build_model(cfg.model, sample_shape(d), output_width(d), cfg.seed);
}

namespace {

double metadata_inclusive_bits(const GraphExecutor& exec) {
  double bits = 0.0, elements = 0.0;
  const auto ctx = exec.context_bits();
  for (size_t i = 0; i < exec.size(); ++i) {
    if (!exec.layer(i).quantizes_input() || !exec.compresses(i)) continue;
    bits += double(ctx[i].payload + ctx[i].metadata);
    elements += double(ctx[i].elements);
  }
  return elements > 0.0 ? bits / elements : 0.0;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const DataSplit& data, size_t max_steps) {
  return train(cfg, data, cfg.level, cfg.bits, max_steps);
}

TrainResult train(const TrainConfig& cfg, const DataSplit& data, Level level, double bits,
                  size_t max_steps) {
  validate_config(cfg);
  const LossKind loss = loss_kind(cfg);
  if (loss == LossKind::kMeanSquaredError && data.train.targets.empty()) {
    throw ConfigError("mse loss needs a regression dataset");
  }
  if (loss == LossKind::kCrossEntropy && data.train.labels.empty()) {
    throw ConfigError("cross-entropy loss needs labels");
  }
  TrainResult result;
  result.model = std::make_unique<GraphExecutor>(build_model_for(cfg, data.train));
  GraphExecutor& exec = *result.model;
  exec.set_seed(cfg.seed);
  auto alloc = apply_level(exec, level, bits, cfg);

  const size_t n = data.train.size();
  const size_t batch = std::min(cfg.batch_size, n);
  const size_t steps_per_epoch = n / batch;
  const auto start = std::chrono::steady_clock::now();
  size_t step = 0;
  bool stop = false;
  for (size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    const auto order = shuffled_rows(n, cfg.seed * 0x9e3779b97f4a7c15ull + epoch + 1);
    for (size_t k = 0; k < steps_per_epoch; ++k) {
      const std::span<const size_t> rows(order.data() + k * batch, batch);
      const Batch b = make_batch(data.train, rows);
      MetricsRow row;
      row.step = step;
      row.epoch = epoch;
      if (alloc) alloc->begin_step(b.ids);
      if (cfg.variance_every > 0 && step % cfg.variance_every == 0 && alloc) {
        row.grad_variance =
            empirical_variance(exec, b, loss, cfg.variance_trials, 0x80000000u + uint32_t(step))
                .total();
        alloc->begin_step(b.ids);
      } else if (cfg.variance_every > 0 && step % cfg.variance_every == 0) {
        row.grad_variance = 0.0;
      }
      exec.set_step(uint32_t(step));
      const Tensor pred = exec.forward(b.inputs);
      if (alloc) {
        row.avg_bits = alloc->step_average_bits();
        row.avg_bits_with_metadata = metadata_inclusive_bits(exec);
      }
      const LossResult l = compute_loss(loss, pred, b);
      row.train_loss = l.loss;
      const ParamGrads grads = exec.backward(l.grad);
      if (alloc) alloc->finish_step(exec);
      sgd_step(exec, grads, float(cfg.learning_rate));

      ++step;
      const bool last_in_epoch = k + 1 == steps_per_epoch;
      stop = max_steps > 0 && step >= max_steps;
      const bool eval_now = cfg.eval_every > 0 ? step % cfg.eval_every == 0 || stop
                                               : last_in_epoch || stop;
      if (eval_now) {
        const EvalResult e = evaluate(exec, data.eval, loss);
        row.eval_loss = e.loss;
        row.eval_accuracy = e.accuracy;
      }
      if (cfg.log_wall_time) {
        row.wall_time_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
      result.log.append(row);
      if (stop) break;
    }
  }
  exec.set_uniform_bits(kMaxBits);
  exec.set_mode(ContextMode::kFullPrecision);

  const auto& rows = result.log.rows();
  if (!rows.empty()) {
    const size_t tail = std::max<size_t>(1, rows.size() / 10);
    double s = 0.0;
    for (size_t i = rows.size() - tail; i < rows.size(); ++i) s += rows[i].train_loss;
    result.final_loss = s / double(tail);
  }
  result.final_eval = evaluate(exec, data.eval, loss);
  return result;
}

}  // namespace actc
