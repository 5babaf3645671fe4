// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "actc/layers.hpp"

namespace actc {

class GraphExecutor;

// min sum_{l,n} w[l][n] / (2^b - 1)^2  s.t.  sum_l dims[l] sum_n b[l][n] <= budget.
struct AllocProblem {
  std::vector<std::vector<double>> weights;  // [layer][sample]
  std::vector<size_t> dims;                  // D per layer
  uint64_t budget = 0;
  uint8_t min_bits = kMinBits;
  uint8_t max_bits = kMaxBits;

  // Budget units consumed with every entry at `bits`.
  uint64_t cost_at(uint8_t bits) const;
};

struct BitAllocation {
  std::vector<std::vector<uint8_t>> bits;  // [layer][sample]
  double objective = 0.0;
  uint64_t consumed = 0;
  size_t decrements = 0;

  std::vector<uint64_t> row_sums() const;
};

double objective(const std::vector<std::vector<double>>& weights,
                 const std::vector<std::vector<uint8_t>>& bits);

struct GreedyOptions {
  // Rank decrements by variance increase per freed budget unit. When false,
  // by the raw variance increase.
  bool normalize_by_dims = true;
  // Spend budget left over after the last decrement.
  bool refill = true;
  // Exchange polishing on problems with at most this many entries.
  size_t exchange_entries = 0;
};

// Starts every entry at max_bits and lowers the cheapest entry until the
// budget holds. Ties go to the lowest (layer, sample). Throws
// std::invalid_argument when even min_bits everywhere exceeds the budget.
BitAllocation greedy_allocate(const AllocProblem& p, const GreedyOptions& opt = {});

// Exact minimizer by knapsack DP over (entry, spent budget). Throws
// std::length_error when the table would exceed `max_cells`.
BitAllocation dp_allocate_exact(const AllocProblem& p, size_t max_cells = 50'000'000);

// Per-sample widths for one layer under a budget of sum_n b_n <= layer_budget.
std::vector<uint8_t> allocate_per_sample(std::span<const double> weights, uint64_t layer_budget,
                                         const GreedyOptions& opt = {});

// Joint solve; returns the allocation whose row sums become the next step's
// per-layer budgets.
BitAllocation allocate_per_layer(const std::vector<SensitivityStats>& stats, uint64_t budget,
                                 const GreedyOptions& opt = {});

enum class EstimatorMode { kStale, kMovingAverage };

// Supplies ||grad_n||^2 at compression time, before the backward pass that
// would measure it.
class GradMagEstimator {
 public:
  GradMagEstimator(EstimatorMode mode, size_t layers, double decay = 0.9, double cold = 1.0);

  EstimatorMode mode() const { return mode_; }
  std::vector<double> estimate(size_t layer, std::span<const uint64_t> sample_ids) const;
  void observe(size_t layer, std::span<const uint64_t> sample_ids,
               std::span<const double> grad_sq);

 private:
  EstimatorMode mode_;
  double decay_;
  double cold_;
  std::vector<std::unordered_map<uint64_t, double>> stale_;
  std::vector<double> average_;
};

enum class AllocationPolicy {
  kUniform,    // every sample at round(avg bits)
  kPerSample,  // stage 1 only, equal per-layer budgets
  kTwoStage,   // stage 1 per layer, stage 2 joint reallocation
};

// Bit chooser implementing the per-step adaptation. Call begin_step before
// forward and finish_step after backward.
class AdaptiveAllocator {
 public:
  AdaptiveAllocator(AllocationPolicy policy, double average_bits, size_t layers,
                    GradMagEstimator estimator, GreedyOptions opt = {});

  void begin_step(std::vector<uint64_t> sample_ids);
  std::vector<uint8_t> choose(const CompressionRequest& req);
  // Feeds observed gradient norms to the estimator and, for the two-stage
  // policy, re-solves the joint problem to set next step's layer budgets.
  void finish_step(const GraphExecutor& exec);

  BitChooser chooser();

  // Per-layer average bits per sample used as the stage-1 budget.
  const std::vector<double>& layer_average_bits() const { return layer_avg_; }
  // sum_l D_l sum_n b_n / (N sum_l D_l) over this step's compressed layers.
  double step_average_bits() const;
  const std::vector<std::vector<uint8_t>>& step_bits() const { return step_bits_; }
  const std::vector<size_t>& step_dims() const { return step_dims_; }
  const BitAllocation& last_joint() const { return last_joint_; }

 private:
  uint64_t layer_budget(size_t layer, size_t samples) const;

  AllocationPolicy policy_;
  double average_bits_;
  GradMagEstimator estimator_;
  GreedyOptions opt_;
  std::vector<double> layer_avg_;
  std::vector<uint64_t> sample_ids_;
  std::vector<std::vector<uint8_t>> step_bits_;
  std::vector<size_t> step_dims_;
  std::vector<CompressionRequest> requests_;
  std::vector<bool> requested_;
  BitAllocation last_joint_;
};

}  // namespace actc
