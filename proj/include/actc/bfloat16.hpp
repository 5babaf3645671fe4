// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>

namespace actc {

// bfloat16 helpers. Values are carried as the raw upper 16 bits of an IEEE
// binary32.

inline float bf16_to_float(uint16_t bits) {
  return std::bit_cast<float>(uint32_t(bits) << 16);
}

// Drops the low 16 bits (round toward zero).
inline uint16_t bf16_truncate(float v) { return uint16_t(std::bit_cast<uint32_t>(v) >> 16); }

// Largest bfloat16 <= v (v finite).
uint16_t bf16_round_down(double v);

// Smallest bfloat16 >= v (v finite, v >= 0 for ranges).
uint16_t bf16_round_up(double v);

}  // namespace actc
