// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "actc/allocator.hpp"
#include "actc/executor.hpp"
#include "actc/loss.hpp"

namespace actc {

// Returns minibatch number `index` of a resampling sequence.
using BatchSource = std::function<Batch(size_t index)>;

// Per-layer Var[g] = E||g||^2 - ||E g||^2, summed over the layer's parameters.
struct VarianceEstimate {
  std::vector<double> variance;
  std::vector<double> std_error;
  size_t trials = 0;

  double total() const;
  double total_std_error() const;
};

// Gradients over `trials` independent quantization draws for a fixed batch
// and fixed weights, using the executor's current mode and bit chooser. Trial
// t uses RNG step first_step + t. Throws std::invalid_argument if trials < 2.
VarianceEstimate empirical_variance(GraphExecutor& exec, const Batch& batch, LossKind loss,
                                    size_t trials, uint32_t first_step = 0);

// Rows are noise sources (each quantizing layer, then minibatch sampling);
// columns are layers with parameters.
struct VarianceReport {
  std::vector<size_t> sources;
  std::vector<size_t> param_layers;
  std::vector<std::vector<double>> quantization;  // V[source][param layer]
  std::vector<double> sampling;                    // S[param layer]
  std::vector<double> total;                       // every context compressed
  std::vector<double> total_std_error;
  size_t trials = 0;
  size_t batches = 0;
  uint64_t seed = 0;
  std::string bits;

  // sum_m V[m][l] + S[l].
  std::vector<double> decomposed_total() const;
  std::string to_csv() const;
};

// V[m][l] is the variance of layer l's gradient when only layer m keeps a
// compressed context, measured as E||g_m - g_fp||^2 over trials that cycle
// through `batches` resampled minibatches. S[l] is the variance of the
// full-precision gradient over those minibatches. The total compresses every
// layer the executor's mask selects. Restores the executor's mode and mask.
VarianceReport decompose_variance(GraphExecutor& exec, const BatchSource& source, LossKind loss,
                                  size_t trials, size_t batches = 100);

// Diagonal terms sum_l sum_n w / B^2 for the given stats and widths.
double approx_objective(const std::vector<SensitivityStats>& stats,
                        const std::vector<std::vector<uint8_t>>& bits);

// Decade histogram; exact zeros are counted separately.
struct LogHistogram {
  int first_decade = 0;  // bin k covers [10^(first+k), 10^(first+k+1))
  std::vector<size_t> counts;
  size_t zeros = 0;

  static LogHistogram of(std::span<const double> values);
  size_t decades_spanned() const;
};

struct LayerHeterogeneity {
  size_t layer = 0;
  LayerKind kind = LayerKind::kLinear;
  size_t dims = 0;
  std::vector<double> group_ranges;
  std::vector<double> sample_sensitivity;
  double sensitivity_per_dim = 0.0;  // sum_n w_n / D
};

struct HeterogeneityReport {
  std::vector<LayerHeterogeneity> layers;

  std::string range_histogram_csv() const;
  std::string sample_sensitivity_csv() const;
  std::string layer_sensitivity_csv() const;
};

// Full-precision pass over `batch` that records group ranges at every
// quantizing layer, then per-sample sensitivities from the observed gradients.
HeterogeneityReport heterogeneity_report(GraphExecutor& exec, const Batch& batch, LossKind loss);

}  // namespace actc
