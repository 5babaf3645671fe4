// SPDX-License-Identifier: Apache-2.0
#include "actc/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <stdexcept>
#include <tuple>

#include "actc/executor.hpp"

namespace actc {

namespace {

double inv_bins_sq(uint8_t bits) {
  const double b = double(bins_for_bits(bits));
  return 1.0 / (b * b);
}

void validate(const AllocProblem& p) {
  if (p.weights.size() != p.dims.size()) {
    throw std::invalid_argument("allocation: " + std::to_string(p.weights.size()) +
                                " weight rows for " + std::to_string(p.dims.size()) + " dims");
  }
  if (p.min_bits < kMinBits || p.max_bits > kMaxBits || p.min_bits > p.max_bits) {
    throw std::invalid_argument("allocation: bit bounds must satisfy 1 <= min <= max <= 8");
  }
  for (size_t l = 0; l < p.weights.size(); ++l) {
    if (p.dims[l] == 0) throw std::invalid_argument("allocation: zero dims at layer " +
                                                    std::to_string(l));
    for (double w : p.weights[l]) {
      if (!(w >= 0.0) || !std::isfinite(w)) {
        throw std::invalid_argument("allocation: weights must be finite and nonnegative");
      }
    }
  }
  if (p.cost_at(p.min_bits) > p.budget) {
    throw std::invalid_argument("allocation: budget " + std::to_string(p.budget) +
                                " is below the minimum " + std::to_string(p.cost_at(p.min_bits)));
  }
}

BitAllocation finish(const AllocProblem& p, std::vector<std::vector<uint8_t>> bits) {
  BitAllocation a;
  a.bits = std::move(bits);
  a.objective = objective(p.weights, a.bits);
  for (size_t l = 0; l < a.bits.size(); ++l) {
    for (uint8_t b : a.bits[l]) a.consumed += uint64_t(p.dims[l]) * b;
  }
  return a;
}

}  // namespace

uint64_t AllocProblem::cost_at(uint8_t bits) const {
  uint64_t c = 0;
  for (size_t l = 0; l < weights.size(); ++l) c += uint64_t(dims[l]) * weights[l].size() * bits;
  return c;
}

std::vector<uint64_t> BitAllocation::row_sums() const {
  std::vector<uint64_t> sums;
  for (const auto& row : bits) sums.push_back(std::accumulate(row.begin(), row.end(), uint64_t{0}));
  return sums;
}

double objective(const std::vector<std::vector<double>>& weights,
                 const std::vector<std::vector<uint8_t>>& bits) {
  if (weights.size() != bits.size()) throw std::invalid_argument("objective: layer count");
  double total = 0.0;
  for (size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].size() != bits[l].size()) {
      throw std::invalid_argument("objective: sample count at layer " + std::to_string(l));
    }
    for (size_t n = 0; n < weights[l].size(); ++n) total += weights[l][n] * inv_bins_sq(bits[l][n]);
  }
  return total;
}

BitAllocation greedy_allocate(const AllocProblem& p, const GreedyOptions& opt) {
  validate(p);
  std::vector<std::vector<uint8_t>> bits(p.weights.size());
  for (size_t l = 0; l < bits.size(); ++l) bits[l].assign(p.weights[l].size(), p.max_bits);

  using Entry = std::tuple<double, size_t, size_t>;  // priority, layer, sample
  std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> heap;
  auto push = [&](size_t l, size_t n) {
    const uint8_t b = bits[l][n];
    if (b <= p.min_bits) return;
    double delta = p.weights[l][n] * (inv_bins_sq(uint8_t(b - 1)) - inv_bins_sq(b));
    if (opt.normalize_by_dims) delta /= double(p.dims[l]);
    heap.emplace(delta, l, n);
  };
  for (size_t l = 0; l < bits.size(); ++l) {
    for (size_t n = 0; n < bits[l].size(); ++n) push(l, n);
  }

  uint64_t consumed = p.cost_at(p.max_bits);
  size_t decrements = 0;
  while (consumed > p.budget) {
    const auto [prio, l, n] = heap.top();
    heap.pop();
    --bits[l][n];
    consumed -= p.dims[l];
    ++decrements;
    push(l, n);
  }
  auto gain_of = [&](size_t l, size_t n) {
    const uint8_t b = bits[l][n];
    double gain = p.weights[l][n] * (inv_bins_sq(b) - inv_bins_sq(uint8_t(b + 1)));
    if (opt.normalize_by_dims) gain /= double(p.dims[l]);
    return gain;
  };
  // Spends leftover budget on the entry with the largest gain per unit among
  // those that still fit, skipping entry (skip_l, skip_n).
  auto refill = [&](size_t skip_l, size_t skip_n) {
    while (true) {
      double best = 0.0;
      size_t bl = 0, bn = 0;
      for (size_t l = 0; l < bits.size(); ++l) {
        if (consumed + p.dims[l] > p.budget) continue;
        for (size_t n = 0; n < bits[l].size(); ++n) {
          if (bits[l][n] >= p.max_bits || (l == skip_l && n == skip_n)) continue;
          const double gain = gain_of(l, n);
          if (gain > best) {
            best = gain;
            bl = l;
            bn = n;
          }
        }
      }
      if (best <= 0.0) return;
      ++bits[bl][bn];
      consumed += p.dims[bl];
    }
  };
  if (opt.refill) refill(SIZE_MAX, SIZE_MAX);

  // Exchange pass for small problems: lower one entry by k steps, refill the
  // others, keep the move if the objective drops.
  size_t entries = 0;
  for (const auto& row : bits) entries += row.size();
  if (entries <= opt.exchange_entries) {
    double current = objective(p.weights, bits);
    for (size_t pass = 0; pass < entries; ++pass) {
      bool improved = false;
      for (size_t l = 0; l < bits.size(); ++l) {
        for (size_t n = 0; n < bits[l].size(); ++n) {
          for (uint8_t k = 1; bits[l][n] >= p.min_bits + k; ++k) {
            const auto saved_bits = bits;
            const uint64_t saved_consumed = consumed;
            bits[l][n] = uint8_t(bits[l][n] - k);
            consumed -= k * p.dims[l];
            refill(l, n);
            const double trial = objective(p.weights, bits);
            if (trial < current * (1.0 - 1e-12)) {
              current = trial;
              improved = true;
              break;
            }
            bits = saved_bits;
            consumed = saved_consumed;
          }
        }
      }
      if (!improved) break;
    }
  }
  BitAllocation a = finish(p, std::move(bits));
  a.decrements = decrements;
  return a;
}

BitAllocation dp_allocate_exact(const AllocProblem& p, size_t max_cells) {
  validate(p);
  struct Item {
    size_t layer, sample, dims;
    double weight;
  };
  std::vector<Item> items;
  for (size_t l = 0; l < p.weights.size(); ++l) {
    for (size_t n = 0; n < p.weights[l].size(); ++n) {
      items.push_back({l, n, p.dims[l], p.weights[l][n]});
    }
  }
  const size_t levels = size_t(p.max_bits - p.min_bits);
  const uint64_t full_extra = p.cost_at(p.max_bits) - p.cost_at(p.min_bits);
  const size_t cap = size_t(std::min<uint64_t>(p.budget - p.cost_at(p.min_bits), full_extra));
  const size_t width = cap + 1;
  if ((items.size() + 1) > max_cells / width) {
    throw std::length_error("dp allocation: " + std::to_string(items.size()) + " entries x " +
                            std::to_string(width) + " budget states exceeds the table limit");
  }

  // best[k][c]: minimum objective of items k.. with at most c extra units.
  std::vector<double> best((items.size() + 1) * width, 0.0);
  std::vector<uint8_t> pick(items.size() * width, 0);
  for (size_t k = items.size(); k-- > 0;) {
    const Item& it = items[k];
    for (size_t c = 0; c < width; ++c) {
      double lowest = std::numeric_limits<double>::infinity();
      uint8_t arg = 0;
      for (size_t e = 0; e <= levels && e * it.dims <= c; ++e) {
        const double v = it.weight * inv_bins_sq(uint8_t(p.min_bits + e)) +
                         best[(k + 1) * width + c - e * it.dims];
        if (v < lowest) {
          lowest = v;
          arg = uint8_t(e);
        }
      }
      best[k * width + c] = lowest;
      pick[k * width + c] = arg;
    }
  }

  std::vector<std::vector<uint8_t>> bits(p.weights.size());
  for (size_t l = 0; l < bits.size(); ++l) bits[l].assign(p.weights[l].size(), p.min_bits);
  size_t c = cap;
  for (size_t k = 0; k < items.size(); ++k) {
    const uint8_t e = pick[k * width + c];
    bits[items[k].layer][items[k].sample] = uint8_t(p.min_bits + e);
    c -= e * items[k].dims;
  }
  return finish(p, std::move(bits));
}

std::vector<uint8_t> allocate_per_sample(std::span<const double> weights, uint64_t layer_budget,
                                         const GreedyOptions& opt) {
  AllocProblem p;
  p.weights.emplace_back(weights.begin(), weights.end());
  p.dims = {1};
  p.budget = layer_budget;
  return greedy_allocate(p, opt).bits[0];
}

BitAllocation allocate_per_layer(const std::vector<SensitivityStats>& stats, uint64_t budget,
                                 const GreedyOptions& opt) {
  AllocProblem p;
  for (const auto& s : stats) {
    p.weights.push_back(s.weight);
    p.dims.push_back(s.dims);
  }
  p.budget = budget;
  return greedy_allocate(p, opt);
}

// ---------------------------------------------------------------------------
// GradMagEstimator

GradMagEstimator::GradMagEstimator(EstimatorMode mode, size_t layers, double decay, double cold)
    : mode_(mode), decay_(decay), cold_(cold), stale_(layers), average_(layers, cold) {
  if (!(decay >= 0.0 && decay < 1.0)) {
    throw std::invalid_argument("estimator decay must lie in [0, 1)");
  }
  if (!(cold > 0.0)) throw std::invalid_argument("estimator cold-start value must be positive");
}

std::vector<double> GradMagEstimator::estimate(size_t layer,
                                               std::span<const uint64_t> sample_ids) const {
  std::vector<double> out(sample_ids.size(), cold_);
  if (mode_ == EstimatorMode::kMovingAverage) {
    std::fill(out.begin(), out.end(), average_.at(layer));
    return out;
  }
  const auto& seen = stale_.at(layer);
  for (size_t n = 0; n < sample_ids.size(); ++n) {
    if (auto it = seen.find(sample_ids[n]); it != seen.end()) out[n] = it->second;
  }
  return out;
}

void GradMagEstimator::observe(size_t layer, std::span<const uint64_t> sample_ids,
                               std::span<const double> grad_sq) {
  if (sample_ids.size() != grad_sq.size()) {
    throw std::invalid_argument("estimator: ids and gradient norms differ in length");
  }
  if (grad_sq.empty()) return;
  if (mode_ == EstimatorMode::kMovingAverage) {
    const double mean =
        std::accumulate(grad_sq.begin(), grad_sq.end(), 0.0) / double(grad_sq.size());
    average_.at(layer) = decay_ * average_.at(layer) + (1.0 - decay_) * mean;
    return;
  }
  auto& seen = stale_.at(layer);
  for (size_t n = 0; n < sample_ids.size(); ++n) seen[sample_ids[n]] = grad_sq[n];
}

// ---------------------------------------------------------------------------
// AdaptiveAllocator

AdaptiveAllocator::AdaptiveAllocator(AllocationPolicy policy, double average_bits, size_t layers,
                                     GradMagEstimator estimator, GreedyOptions opt)
    : policy_(policy),
      average_bits_(average_bits),
      estimator_(std::move(estimator)),
      opt_(opt),
      layer_avg_(layers, average_bits),
      step_bits_(layers),
      step_dims_(layers, 0),
      requests_(layers),
      requested_(layers, false) {
  if (!(average_bits >= kMinBits && average_bits <= kMaxBits)) {
    throw std::invalid_argument("average bits " + std::to_string(average_bits) +
                                " outside [1, 8]");
  }
}

void AdaptiveAllocator::begin_step(std::vector<uint64_t> sample_ids) {
  sample_ids_ = std::move(sample_ids);
  for (auto& b : step_bits_) b.clear();
  std::fill(step_dims_.begin(), step_dims_.end(), 0);
  std::fill(requested_.begin(), requested_.end(), false);
}

uint64_t AdaptiveAllocator::layer_budget(size_t layer, size_t samples) const {
  const double want = std::floor(layer_avg_[layer] * double(samples) + 1e-9);
  return std::clamp<uint64_t>(uint64_t(want), uint64_t(samples) * kMinBits,
                              uint64_t(samples) * kMaxBits);
}

std::vector<uint8_t> AdaptiveAllocator::choose(const CompressionRequest& req) {
  const size_t n_samples = req.range_sq.size();
  if (req.layer >= layer_avg_.size()) {
    throw std::out_of_range("allocator: layer " + std::to_string(req.layer) + " out of range");
  }
  if (sample_ids_.size() != n_samples) {
    sample_ids_.resize(n_samples);
    std::iota(sample_ids_.begin(), sample_ids_.end(), uint64_t{0});
  }
  std::vector<uint8_t> bits;
  if (policy_ == AllocationPolicy::kUniform) {
    bits.assign(n_samples, uint8_t(std::lround(average_bits_)));
  } else {
    const std::vector<double> est = estimator_.estimate(req.layer, sample_ids_);
    const SensitivityStats stats = req.sensitivity(est);
    bits = allocate_per_sample(stats.weight, layer_budget(req.layer, n_samples), opt_);
  }
  step_bits_[req.layer] = bits;
  step_dims_[req.layer] = req.dims;
  requests_[req.layer] = req;
  requested_[req.layer] = true;
  return bits;
}

void AdaptiveAllocator::finish_step(const GraphExecutor& exec) {
  std::vector<size_t> layers;
  for (size_t l = 0; l < requested_.size(); ++l) {
    if (!requested_[l]) continue;
    const auto& grad = exec.layer(l).observed_grad_sq();
    if (grad.size() == sample_ids_.size()) estimator_.observe(l, sample_ids_, grad);
    layers.push_back(l);
  }
  if (policy_ != AllocationPolicy::kTwoStage || layers.empty()) return;

  std::vector<SensitivityStats> stats;
  uint64_t dims_total = 0;
  for (size_t l : layers) {
    stats.push_back(requests_[l].sensitivity(exec.layer(l).observed_grad_sq()));
    dims_total += stats.back().dims;
  }
  const size_t n_samples = sample_ids_.size();
  const auto budget =
      uint64_t(std::floor(average_bits_ * double(n_samples) * double(dims_total) + 1e-6));
  last_joint_ = allocate_per_layer(stats, budget, opt_);
  const auto sums = last_joint_.row_sums();
  for (size_t i = 0; i < layers.size(); ++i) {
    layer_avg_[layers[i]] = double(sums[i]) / double(n_samples);
  }
}

BitChooser AdaptiveAllocator::chooser() {
  return [this](const CompressionRequest& req) { return choose(req); };
}

double AdaptiveAllocator::step_average_bits() const {
  double bits = 0.0, elements = 0.0;
  for (size_t l = 0; l < step_bits_.size(); ++l) {
    for (uint8_t b : step_bits_[l]) bits += double(b) * double(step_dims_[l]);
    elements += double(step_bits_[l].size()) * double(step_dims_[l]);
  }
  return elements > 0.0 ? bits / elements : 0.0;
}

}  // namespace actc
