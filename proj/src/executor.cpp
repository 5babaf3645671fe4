// SPDX-License-Identifier: Apache-2.0
#include "actc/executor.hpp"

#include <stdexcept>

namespace actc {

GraphExecutor::GraphExecutor(std::vector<std::unique_ptr<Layer>> layers)
    : layers_(std::move(layers)), compress_(layers_.size(), true) {
  if (layers_.empty()) throw std::invalid_argument("executor needs at least one layer");
  set_uniform_bits(8);
}

void GraphExecutor::set_compress_mask(std::vector<bool> mask) {
  if (mask.size() != layers_.size()) {
    throw std::invalid_argument("compress mask has " + std::to_string(mask.size()) +
                                " entries for " + std::to_string(layers_.size()) + " layers");
  }
  compress_ = std::move(mask);
}

void GraphExecutor::compress_only(size_t layer) {
  std::vector<bool> mask(layers_.size(), false);
  mask.at(layer) = true;
  compress_ = std::move(mask);
}

bool GraphExecutor::compresses(size_t layer) const {
  return mode_ == ContextMode::kCompressed && compress_.at(layer);
}

void GraphExecutor::set_group_size(uint32_t g) {
  if (g == 0) throw std::invalid_argument("group size must be positive");
  group_size_ = g;
}

void GraphExecutor::set_uniform_bits(uint8_t bits) {
  if (bits < kMinBits || bits > kMaxBits) {
    throw std::invalid_argument("bit width " + std::to_string(bits) + " outside [1, 8]");
  }
  chooser_ = [bits](const CompressionRequest& req) {
    return std::vector<uint8_t>(req.range_sq.size(), bits);
  };
}

Tensor GraphExecutor::forward(const Tensor& input) {
  release_contexts();
  forwarded_ = false;
  Tensor h = input;
  for (size_t i = 0; i < layers_.size(); ++i) {
    ForwardOptions opt;
    opt.layer_index = i;
    opt.compress = compresses(i);
    opt.group_size = group_size_;
    opt.key = QuantKey{seed_, step_, uint32_t(i), 0};
    opt.threads = threads_;
    opt.bn_mode = bn_mode_;
    opt.choose_bits = &chooser_;
    try {
      h = layers_[i]->forward(h, opt);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("layer " + std::to_string(i) + " (" +
                                  layers_[i]->describe() + "): " + e.what());
    } catch (const std::domain_error& e) {
      throw std::domain_error("layer " + std::to_string(i) + " (" + layers_[i]->describe() +
                              "): " + e.what());
    }
  }
  link_batchnorm_gains();
  output_shape_ = h.shape();
  forwarded_ = true;
  return h;
}

// Each batch normalization charges its input-gradient noise to the nearest
// weighted layer upstream, looking through element-wise and pooling layers.
void GraphExecutor::link_batchnorm_gains() {
  for (size_t i = 0; i < layers_.size(); ++i) {
    auto* bn = dynamic_cast<BatchNorm*>(layers_[i].get());
    if (bn == nullptr) continue;
    std::vector<double> gain;
    for (size_t j = i; j-- > 0;) {
      const LayerKind k = layers_[j]->kind();
      if (k == LayerKind::kLinear || k == LayerKind::kConv2d) {
        gain = layers_[j]->output_noise_gain();
        break;
      }
      if (k == LayerKind::kBatchNorm) break;
    }
    bn->set_upstream_gain(std::move(gain));
  }
}

ParamGrads GraphExecutor::backward(const Tensor& output_grad) {
  if (!forwarded_) throw std::logic_error("backward called before forward");
  if (output_grad.shape() != output_shape_) {
    throw std::invalid_argument("output gradient shape " + shape_str(output_grad.shape()) +
                                " does not match network output " + shape_str(output_shape_));
  }
  forwarded_ = false;
  Tensor g = output_grad;
  ParamGrads grads(layers_.size());
  for (size_t i = layers_.size(); i-- > 0;) {
    if (!layers_[i]->has_context()) {
      throw std::logic_error("layer " + std::to_string(i) + " (" + layers_[i]->describe() +
                             "): context missing");
    }
    g = layers_[i]->backward(g);
    grads[i] = layers_[i]->grads();
  }
  input_grad_ = std::move(g);
  return grads;
}

std::vector<ContextBits> GraphExecutor::context_bits() const {
  std::vector<ContextBits> out;
  out.reserve(layers_.size());
  for (const auto& l : layers_) out.push_back(l->context_bits());
  return out;
}

void GraphExecutor::release_contexts() {
  for (auto& l : layers_) l->release_context();
}

void sgd_step(GraphExecutor& exec, const ParamGrads& grads, float learning_rate) {
  if (grads.size() != exec.size()) throw std::invalid_argument("sgd: gradient layer count");
  for (size_t i = 0; i < exec.size(); ++i) {
    auto& params = exec.layer(i).params();
    if (grads[i].size() != params.size()) {
      throw std::invalid_argument("sgd: layer " + std::to_string(i) + " parameter count");
    }
    for (size_t p = 0; p < params.size(); ++p) {
      if (grads[i][p].shape() != params[p].shape()) {
        throw std::invalid_argument("sgd: layer " + std::to_string(i) + " gradient shape " +
                                    shape_str(grads[i][p].shape()) + " vs parameter " +
                                    shape_str(params[p].shape()));
      }
      auto w = params[p].data();
      auto g = grads[i][p].data();
      for (size_t k = 0; k < w.size(); ++k) w[k] -= learning_rate * g[k];
    }
  }
}

}  // namespace actc
