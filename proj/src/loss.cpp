// SPDX-License-Identifier: Apache-2.0
#include "actc/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace actc {

std::string to_string(LossKind kind) {
  return kind == LossKind::kMeanSquaredError ? "mse" : "xent";
}

LossResult mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("mse: prediction " + shape_str(pred.shape()) +
                                " vs target " + shape_str(target.shape()));
  }
  const double inv_n = 1.0 / double(pred.samples());
  LossResult r{0.0, Tensor(pred.shape())};
  for (size_t i = 0; i < pred.numel(); ++i) {
    const double d = double(pred[i]) - target[i];
    r.loss += 0.5 * d * d;
    r.grad[i] = float(d * inv_n);
  }
  r.loss *= inv_n;
  return r;
}

LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.samples() != labels.size()) {
    throw std::invalid_argument("cross entropy: logits " + shape_str(logits.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const size_t n_samples = logits.samples(), classes = logits.dim(1);
  const double inv_n = 1.0 / double(n_samples);
  LossResult r{0.0, Tensor(logits.shape())};
  std::vector<double> p(classes);
  for (size_t n = 0; n < n_samples; ++n) {
    const int y = labels[n];
    if (y < 0 || size_t(y) >= classes) {
      throw std::invalid_argument("cross entropy: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(classes) + ")");
    }
    auto z = logits.sample(n);
    const double zmax = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (size_t k = 0; k < classes; ++k) total += p[k] = std::exp(double(z[k]) - zmax);
    r.loss += std::log(total) - (double(z[size_t(y)]) - zmax);
    auto g = r.grad.sample(n);
    for (size_t k = 0; k < classes; ++k) {
      g[k] = float((p[k] / total - (k == size_t(y) ? 1.0 : 0.0)) * inv_n);
    }
  }
  r.loss *= inv_n;
  return r;
}

LossResult compute_loss(LossKind kind, const Tensor& pred, const Batch& batch) {
  return kind == LossKind::kMeanSquaredError ? mse_loss(pred, batch.targets)
                                             : softmax_cross_entropy(pred, batch.labels);
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.samples() != labels.size()) throw std::invalid_argument("accuracy: size mismatch");
  size_t hits = 0;
  for (size_t n = 0; n < labels.size(); ++n) {
    auto z = logits.sample(n);
    const auto best = size_t(std::max_element(z.begin(), z.end()) - z.begin());
    hits += best == size_t(labels[n]);
  }
  return double(hits) / double(labels.size());
}

}  // namespace actc
