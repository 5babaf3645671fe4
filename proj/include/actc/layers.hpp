// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "actc/quantize.hpp"
#include "actc/rng.hpp"
#include "actc/tensor.hpp"

namespace actc {

enum class LayerKind { kLinear, kConv2d, kReLU, kBatchNorm, kMaxPool2d, kAvgPool2d };

std::string to_string(LayerKind kind);

// Batch normalization keeps one quantized copy of its input by default. The
// dual-copy mode draws a second independent copy so the input gradient is
// exactly unbiased.
enum class BatchNormMode { kSingleCopy, kDualCopy };

inline constexpr double kBatchNormStdFloor = 1e-5;

// Per-sample sensitivity of one layer: w_n = coefficient * ||grad_n||^2 *
// ||R_n||^2. For batch normalization the gradient factor is one constant per
// layer: the mean of the per-sample input-gradient variance factors.
struct SensitivityStats {
  std::vector<double> weight;    // w_n
  std::vector<double> range_sq;  // ||R_n||^2
  std::vector<double> grad_sq;   // ||grad_n||^2 estimate used
  size_t dims = 0;               // D, elements per sample of the quantized input
};

SensitivityStats linear_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                    std::span<const double> grad_sq, size_t dims);
// K kernel locations, I input locations, A groups.
SensitivityStats conv2d_sensitivity(uint32_t group_size, size_t kernel_locations,
                                    size_t input_locations, size_t groups,
                                    std::span<const double> range_sq,
                                    std::span<const double> grad_sq, size_t dims);
// w_n = (G/6) kappa ||R_n||^2 with kappa the mean of grad_term (1 if empty).
SensitivityStats batchnorm_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                       std::span<const double> grad_term, size_t dims);

// What a bit chooser sees when a layer is about to compress its input.
struct CompressionRequest {
  size_t layer = 0;
  LayerKind kind = LayerKind::kLinear;
  size_t dims = 0;
  uint32_t group_size = kDefaultGroupSize;
  std::span<const double> range_sq;
  // Maps per-sample gradient magnitudes to sensitivities for this layer.
  std::function<SensitivityStats(std::span<const double> grad_sq)> sensitivity;
};

using BitChooser = std::function<std::vector<uint8_t>(const CompressionRequest&)>;

struct ForwardOptions {
  size_t layer_index = 0;
  bool compress = false;
  uint32_t group_size = kDefaultGroupSize;
  QuantKey key;
  unsigned threads = 1;
  BatchNormMode bn_mode = BatchNormMode::kSingleCopy;
  const BitChooser* choose_bits = nullptr;
};

// Bit accounting for the context a layer currently holds.
struct ContextBits {
  uint64_t payload = 0;           // quantized codes
  uint64_t metadata = 0;          // per-group R, Z
  uint64_t lossless = 0;          // masks, argmax indices
  uint64_t full_precision = 0;    // float32 tensors
  uint64_t serialized_bytes = 0;  // exact size of serialized packed contexts
  size_t elements = 0;            // elements of the saved activation
  // A full-precision ReLU keeps its output, which is the tensor the next
  // layer (or the loss) holds anyway.
  bool aliases_output = false;

  uint64_t total() const { return payload + metadata + lossless + full_precision; }
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual std::string describe() const = 0;

  // Computes the output and saves this layer's context (compressed or full
  // precision per `opt`). Throws std::invalid_argument on shape mismatch.
  virtual Tensor forward(const Tensor& x, const ForwardOptions& opt) = 0;
  // Consumes the saved context, fills grads(), returns the input gradient.
  virtual Tensor backward(const Tensor& grad_out) = 0;

  virtual bool quantizes_input() const { return false; }
  virtual ContextBits context_bits() const = 0;
  virtual bool has_context() const = 0;
  virtual void release_context() = 0;

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Tensor>& grads() { return grads_; }
  const std::vector<Tensor>& grads() const { return grads_; }

  // Per-sample ||R_n||^2 measured at the last compression (empty otherwise).
  const std::vector<double>& range_sq() const { return range_sq_; }
  // Per-sample ||grad_out,n||^2 observed by the last backward pass (batch
  // normalization: its per-sample weight-gradient variance factor).
  const std::vector<double>& observed_grad_sq() const { return observed_grad_sq_; }
  // Per-sample factor mapping output-gradient noise variance (per element)
  // to weight-gradient variance, from the last forward. Empty for layers
  // without weights.
  const std::vector<double>& output_noise_gain() const { return noise_gain_; }
  // Sensitivity for arbitrary gradient magnitudes, using the range norms
  // measured at the last compression. Requires a prior compressed forward.
  virtual SensitivityStats sensitivity(std::span<const double> grad_sq) const;

 protected:
  void record_grad_sq(const Tensor& grad_out) { observed_grad_sq_ = per_sample_sq_norm(grad_out); }
  // Measures ranges and asks the chooser for per-sample bit widths.
  std::vector<uint8_t> choose_bits(const Tensor& x, const ForwardOptions& opt);
  virtual SensitivityStats make_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                            std::span<const double> grad_sq,
                                            size_t dims) const;

  std::vector<Tensor> params_;
  std::vector<Tensor> grads_;
  std::vector<double> range_sq_;
  std::vector<double> observed_grad_sq_;
  std::vector<double> noise_gain_;
  size_t range_dims_ = 0;
  uint32_t range_group_size_ = kDefaultGroupSize;
};

// Saved input of a quantizing layer: either the float tensor or its packed
// form.
struct SavedInput {
  std::optional<Tensor> full;
  std::optional<PackedActivation> packed;

  bool present() const { return full.has_value() || packed.has_value(); }
  Tensor restore() const;
  ContextBits bits() const;
  void reset() {
    full.reset();
    packed.reset();
  }
};

// y = x W (+ b), with x flattened to [N, in]. W is [in, out].
class Linear : public Layer {
 public:
  Linear(size_t in_features, size_t out_features, bool bias = true);

  LayerKind kind() const override { return LayerKind::kLinear; }
  std::string describe() const override;
  Tensor forward(const Tensor& x, const ForwardOptions& opt) override;
  Tensor backward(const Tensor& grad_out) override;
  bool quantizes_input() const override { return true; }
  ContextBits context_bits() const override { return saved_.bits(); }
  bool has_context() const override { return saved_.present(); }
  void release_context() override { saved_.reset(); }

  Tensor& weight() { return params_[0]; }
  size_t in_features() const { return in_; }
  size_t out_features() const { return out_; }

 private:
  size_t in_, out_;
  bool bias_;
  SavedInput saved_;
  Shape input_shape_;
};

struct Conv2dGeometry {
  size_t in_channels = 1, out_channels = 1;
  size_t kernel_h = 3, kernel_w = 3;
  size_t stride = 1, padding = 0;
  size_t groups = 1;
};

// NCHW convolution, dilation 1. Weight is [out, in/groups, kh, kw].
class Conv2d : public Layer {
 public:
  explicit Conv2d(const Conv2dGeometry& geometry, bool bias = true);

  LayerKind kind() const override { return LayerKind::kConv2d; }
  std::string describe() const override;
  Tensor forward(const Tensor& x, const ForwardOptions& opt) override;
  Tensor backward(const Tensor& grad_out) override;
  bool quantizes_input() const override { return true; }
  ContextBits context_bits() const override { return saved_.bits(); }
  bool has_context() const override { return saved_.present(); }
  void release_context() override { saved_.reset(); }

  const Conv2dGeometry& geometry() const { return geo_; }
  Tensor& weight() { return params_[0]; }
  Shape output_shape(const Shape& input) const;

 protected:
  SensitivityStats make_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                    std::span<const double> grad_sq,
                                    size_t dims) const override;

 private:
  Conv2dGeometry geo_;
  bool bias_;
  SavedInput saved_;
  Shape input_shape_;
};

// Keeps a 1-bit mask when compressed, otherwise its output.
class ReLU : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::kReLU; }
  std::string describe() const override { return "relu"; }
  Tensor forward(const Tensor& x, const ForwardOptions& opt) override;
  Tensor backward(const Tensor& grad_out) override;
  ContextBits context_bits() const override;
  bool has_context() const override { return mask_.has_value() || output_.has_value(); }
  void release_context() override {
    mask_.reset();
    output_.reset();
  }

 private:
  Shape shape_;
  std::optional<std::vector<uint8_t>> mask_;  // LSB-first bitset
  std::optional<Tensor> output_;
};

// Normalizes each channel (axis 1) over all other axes, without running
// statistics: y = (x - m) w / s + b with s the biased standard deviation.
class BatchNorm : public Layer {
 public:
  explicit BatchNorm(size_t channels);

  LayerKind kind() const override { return LayerKind::kBatchNorm; }
  std::string describe() const override;
  Tensor forward(const Tensor& x, const ForwardOptions& opt) override;
  Tensor backward(const Tensor& grad_out) override;
  bool quantizes_input() const override { return true; }
  ContextBits context_bits() const override;
  bool has_context() const override { return saved_.present(); }
  void release_context() override {
    saved_.reset();
    second_.reset();
  }

  // Gain of the weighted layer feeding this one (its output_noise_gain()).
  // Input-gradient noise is charged through it; empty charges nothing.
  void set_upstream_gain(std::vector<double> gain) { upstream_gain_ = std::move(gain); }
  // Per-sample mean input-gradient variance factor from the last backward.
  const std::vector<double>& input_grad_factor() const { return input_factor_; }

 protected:
  SensitivityStats make_sensitivity(uint32_t group_size, std::span<const double> range_sq,
                                    std::span<const double> grad_sq,
                                    size_t dims) const override;

 private:
  size_t channels_;
  SavedInput saved_;
  std::optional<PackedActivation> second_;  // dual-copy mode only
  std::vector<double> mean_, stddev_;
  std::vector<float> weight_at_forward_;
  std::vector<double> upstream_gain_, input_factor_;
};

struct PoolGeometry {
  size_t kernel_h = 2, kernel_w = 2;
  size_t stride = 2;
};

// Stores one 8-bit argmax index per output location in every mode.
class MaxPool2d : public Layer {
 public:
  explicit MaxPool2d(const PoolGeometry& geometry);

  LayerKind kind() const override { return LayerKind::kMaxPool2d; }
  std::string describe() const override;
  Tensor forward(const Tensor& x, const ForwardOptions& opt) override;
  Tensor backward(const Tensor& grad_out) override;
  ContextBits context_bits() const override;
  bool has_context() const override { return indices_.has_value(); }
  void release_context() override { indices_.reset(); }

  const std::vector<uint8_t>& indices() const { return *indices_; }

 private:
  PoolGeometry geo_;
  Shape input_shape_;
  std::optional<std::vector<uint8_t>> indices_;
};

// Needs nothing but the input shape for its backward pass.
class AvgPool2d : public Layer {
 public:
  explicit AvgPool2d(const PoolGeometry& geometry);

  LayerKind kind() const override { return LayerKind::kAvgPool2d; }
  std::string describe() const override;
  Tensor forward(const Tensor& x, const ForwardOptions& opt) override;
  Tensor backward(const Tensor& grad_out) override;
  ContextBits context_bits() const override { return {}; }
  bool has_context() const override { return input_shape_.has_value(); }
  void release_context() override { input_shape_.reset(); }

 private:
  PoolGeometry geo_;
  std::optional<Shape> input_shape_;
};

// Pooling output extent for one spatial axis; throws if the kernel does not fit.
size_t pooled_extent(size_t in, size_t kernel, size_t stride, size_t padding);

}  // namespace actc
