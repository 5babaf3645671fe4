// SPDX-License-Identifier: Apache-2.0
#include "actc/harness/levels.hpp"

#include <cmath>

namespace actc {

std::unique_ptr<AdaptiveAllocator> apply_level(GraphExecutor& exec, Level level, double bits,
                                               const TrainConfig& cfg) {
  exec.set_group_size(cfg.group_size);
  exec.set_bn_mode(cfg.bn_mode);
  exec.set_threads(cfg.threads);
  exec.set_uniform_bits(kMaxBits);
  std::vector<bool> mask(exec.size(), true);

  AllocationPolicy policy = AllocationPolicy::kUniform;
  switch (level) {
    case Level::kL0:
      exec.set_mode(ContextMode::kFullPrecision);
      exec.set_compress_mask(mask);
      return nullptr;
    case Level::kL1: {
      bool any = false;
      for (size_t i = 0; i < exec.size(); ++i) {
        mask[i] = exec.layer(i).kind() == LayerKind::kConv2d;
        any = any || mask[i];
      }
      exec.set_compress_mask(mask);
      if (!any) {
        exec.set_mode(ContextMode::kFullPrecision);
        return nullptr;
      }
      bits = kConvOnlyBits;
      break;
    }
    case Level::kL2:
      if (bits != std::floor(bits)) throw ConfigError("L2 needs integer bits");
      break;
    case Level::kL2_5:
      policy = AllocationPolicy::kPerSample;
      break;
    case Level::kL3:
      policy = AllocationPolicy::kTwoStage;
      break;
  }
  if (level != Level::kL1) exec.set_compress_mask(mask);
  exec.set_mode(ContextMode::kCompressed);
  auto alloc = std::make_unique<AdaptiveAllocator>(
      policy, bits, exec.size(), GradMagEstimator(cfg.estimator, exec.size(), cfg.ema_decay),
      GreedyOptions{cfg.normalize_greedy});
  exec.set_bit_chooser(alloc->chooser());
  return alloc;
}

}  // namespace actc
