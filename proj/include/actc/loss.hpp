// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "actc/tensor.hpp"

namespace actc {

enum class LossKind { kMeanSquaredError, kCrossEntropy };

std::string to_string(LossKind kind);

// One minibatch. Regression targets live in `targets`, class labels in
// `labels`; `ids` are dataset row indices.
struct Batch {
  Tensor inputs;
  Tensor targets;
  std::vector<int> labels;
  std::vector<uint64_t> ids;

  size_t size() const { return inputs.empty() ? 0 : inputs.samples(); }
};

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d loss / d prediction
};

// (1/N) sum_n 0.5 ||p_n - t_n||^2.
LossResult mse_loss(const Tensor& pred, const Tensor& target);
// Mean over samples of -log softmax(logits)[label].
LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
LossResult compute_loss(LossKind kind, const Tensor& pred, const Batch& batch);

// Fraction of rows whose argmax equals the label.
double accuracy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace actc
