// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "actc/executor.hpp"

namespace actc {

// Parses a whitespace-separated layer list:
//   linear(in,out)  conv(in,out,k[,stride[,pad[,groups]]])  bn(c)  relu
//   maxpool(k[,stride])  avgpool(k[,stride])
// Kernel extents accept "3" or "1x3". Throws ConfigError on bad syntax.
std::vector<std::unique_ptr<Layer>> parse_layers(const std::string& spec);

// Expands a preset for the given per-sample input shape and output width:
//   mlp        linear(D,128) relu linear(128,K)
//   cnn        conv3x3(8) bn relu maxpool conv3x3(16) bn relu avgpool linear
//   block      conv3x3(C) bn relu
//   quadratic  linear(D,K)
// Anything else is returned unchanged.
std::string expand_model(const std::string& spec, const Shape& sample_shape, size_t outputs);

// Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero biases, unit
// batchnorm scales.
void init_weights(GraphExecutor& exec, uint64_t seed);

GraphExecutor build_model(const std::string& spec, const Shape& sample_shape, size_t outputs,
                          uint64_t seed);

}  // namespace actc
