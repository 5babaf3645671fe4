// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>

namespace actc {

// Philox4x32-10 block function (Salmon et al., "Parallel random numbers: as
// easy as 1, 2, 3"). Pure function of (counter, key).
std::array<uint32_t, 4> philox4x32(std::array<uint32_t, 4> counter,
                                   std::array<uint32_t, 2> key);

// Identifies one stream of quantization draws. Two keys that compare equal
// produce identical draws regardless of call order or thread.
struct QuantKey {
  uint64_t seed = 0;
  uint32_t step = 0;
  uint32_t layer = 0;
  // Distinguishes independent copies drawn for the same layer and step
  // (e.g. the second copy of dual-copy batch normalization).
  uint8_t stream = 0;

  bool operator==(const QuantKey&) const = default;
};

// Sequential uniforms for one quantization group. Element k of group g always
// receives the same draw for a given key.
class QuantRng {
 public:
  QuantRng(const QuantKey& key, uint32_t group);

  // Uniform in (0, 1).
  double next_uniform();

 private:
  void refill();

  std::array<uint32_t, 2> key_;
  std::array<uint32_t, 4> counter_;
  std::array<uint32_t, 4> block_{};
  int lane_ = 4;
};

}  // namespace actc
