// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "actc/executor.hpp"
#include "actc/harness/config.hpp"
#include "actc/loss.hpp"

namespace actc {

struct LayerMemory {
  size_t layer = 0;
  std::string name;
  ContextBits full;        // full-precision mode
  ContextBits compressed;  // configured mode

  // Bits charged per element of this layer's saved activation. A
  // full-precision ReLU output is shared with its consumer and costs nothing.
  double full_per_element() const;
  double compressed_per_element() const;
};

struct MemoryReport {
  std::vector<LayerMemory> layers;
  uint64_t full_bits = 0;
  uint64_t compressed_bits = 0;
  uint64_t payload_bits = 0;
  uint64_t metadata_bits = 0;
  uint64_t serialized_bytes = 0;
  // Sums of per-layer bits per element.
  double full_per_element = 0.0;
  double compressed_per_element = 0.0;
  double payload_per_element = 0.0;
  double ratio = 1.0;  // full_per_element / compressed_per_element

  std::string to_text() const;
  std::string to_csv() const;
};

// Runs one forward pass in the executor's configured mode and one in
// full-precision mode on `batch`, and accounts every saved context.
MemoryReport memory_report(GraphExecutor& exec, const Batch& batch);

// Loads the configured data and model, applies the level, and reports on the
// first batch.
MemoryReport memory_report(const TrainConfig& cfg);

}  // namespace actc
