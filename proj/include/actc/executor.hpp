// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "actc/layers.hpp"
#include "actc/tensor.hpp"

namespace actc {

enum class ContextMode { kFullPrecision, kCompressed };

// Parameter gradients, indexed [layer][parameter].
using ParamGrads = std::vector<std::vector<Tensor>>;

// Straight-line layer graph. Forward values never depend on the mode; only
// the saved contexts do.
class GraphExecutor {
 public:
  explicit GraphExecutor(std::vector<std::unique_ptr<Layer>> layers);

  size_t size() const { return layers_.size(); }
  Layer& layer(size_t i) { return *layers_.at(i); }
  const Layer& layer(size_t i) const { return *layers_.at(i); }

  ContextMode mode() const { return mode_; }
  void set_mode(ContextMode mode) { mode_ = mode; }

  // Which layers compress their context in compressed mode (default: all).
  const std::vector<bool>& compress_mask() const { return compress_; }
  void set_compress_mask(std::vector<bool> mask);
  void compress_only(size_t layer);
  bool compresses(size_t layer) const;

  uint32_t group_size() const { return group_size_; }
  void set_group_size(uint32_t g);
  void set_bn_mode(BatchNormMode mode) { bn_mode_ = mode; }
  void set_threads(unsigned threads) { threads_ = threads == 0 ? 1 : threads; }
  void set_bit_chooser(BitChooser chooser) { chooser_ = std::move(chooser); }
  void set_uniform_bits(uint8_t bits);

  uint64_t seed() const { return seed_; }
  void set_seed(uint64_t seed) { seed_ = seed; }
  uint32_t step() const { return step_; }
  void set_step(uint32_t step) { step_ = step; }

  // Throws std::invalid_argument naming the failing layer.
  Tensor forward(const Tensor& input);
  // Consumes every saved context. Throws std::logic_error without a prior
  // forward.
  ParamGrads backward(const Tensor& output_grad);
  // Input gradient of the last backward pass.
  const Tensor& input_grad() const { return input_grad_; }

  std::vector<ContextBits> context_bits() const;
  void release_contexts();

 private:
  void link_batchnorm_gains();

  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<bool> compress_;
  ContextMode mode_ = ContextMode::kFullPrecision;
  uint32_t group_size_ = kDefaultGroupSize;
  BatchNormMode bn_mode_ = BatchNormMode::kSingleCopy;
  unsigned threads_ = 1;
  BitChooser chooser_;
  uint64_t seed_ = 0;
  uint32_t step_ = 0;
  Shape output_shape_;
  bool forwarded_ = false;
  Tensor input_grad_;
};

// theta <- theta - lr * grad for every parameter.
void sgd_step(GraphExecutor& exec, const ParamGrads& grads, float learning_rate);

}  // namespace actc
