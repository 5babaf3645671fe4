// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>

#include "actc/allocator.hpp"
#include "actc/executor.hpp"
#include "actc/harness/config.hpp"

namespace actc {

inline constexpr uint8_t kConvOnlyBits = 4;

// Configures the executor's context policy for `level` at `bits` average bits:
//   L0   no compression
//   L1   4-bit per-group quantization of conv inputs only
//   L2   uniform per-group quantization of every context
//   L2.5 per-sample allocation, equal budgets across layers
//   L3   per-sample allocation plus joint per-layer reallocation
// Returns the allocator now bound as the executor's bit chooser (null for L0
// and for L1 on a net without conv layers). It must outlive its use.
std::unique_ptr<AdaptiveAllocator> apply_level(GraphExecutor& exec, Level level, double bits,
                                               const TrainConfig& cfg);

}  // namespace actc
