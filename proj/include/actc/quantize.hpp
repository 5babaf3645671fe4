// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "actc/rng.hpp"
#include "actc/tensor.hpp"

namespace actc {

inline constexpr uint32_t kDefaultGroupSize = 256;
inline constexpr int kMinBits = 1;
inline constexpr int kMaxBits = 8;
// Range and zero point, two bfloat16 values per group.
inline constexpr uint64_t kMetadataBitsPerGroup = 32;

// Number of quantization bins for a code width: 2^bits - 1.
inline constexpr int bins_for_bits(int bits) { return (1 << bits) - 1; }

// Per-group range R and zero point Z, stored as raw bfloat16.
//
// Z is the group minimum rounded down and R is (max - Z) rounded up, so the
// grid [Z, Z + R] always covers every element of the group. The stored values
// are the ones used for both quantization and dequantization.
struct GroupMeta {
  uint16_t range_bits = 0;
  uint16_t zero_bits = 0;

  float range() const;
  float zero() const;
  static GroupMeta from_values(std::span<const float> values);
  static GroupMeta from_floats(float range, float zero);

  bool operator==(const GroupMeta&) const = default;
};

struct QuantizedGroup {
  std::vector<uint8_t> codes;
  GroupMeta meta;
};

// Stochastically rounds B(h - Z)/R to integer codes. Throws on an empty group,
// non-finite values, or bits outside [1, 8].
QuantizedGroup quantize_group(std::span<const float> values, int bits, QuantRng& rng);

// Same as quantize_group but with caller-supplied metadata. Values outside
// [Z, Z + R] are clamped to the grid.
std::vector<uint8_t> quantize_group_with_meta(std::span<const float> values, int bits,
                                              const GroupMeta& meta, QuantRng& rng);

// h = c * R / B + Z. Throws if a code exceeds 2^bits - 1.
std::vector<float> dequantize_group(std::span<const uint8_t> codes, const GroupMeta& meta,
                                    int bits);

// Compressed context for one saved activation. Each sample's features are cut
// into contiguous groups of group_size elements; the last group of a sample
// may be shorter. Codes for all real elements are packed LSB-first, sample by
// sample, into one payload.
struct PackedActivation {
  uint32_t group_size = kDefaultGroupSize;
  Shape shape;
  std::vector<uint8_t> bits;     // one width per sample
  std::vector<GroupMeta> meta;   // sample-major
  std::vector<uint8_t> payload;

  size_t samples() const { return bits.size(); }
  size_t sample_size() const;
  size_t groups_per_sample() const;
  uint64_t payload_bits() const;
  uint64_t metadata_bits() const { return meta.size() * kMetadataBitsPerGroup; }
  uint64_t serialized_size() const;

  bool operator==(const PackedActivation&) const = default;
};

// bits_per_sample must have one entry per leading-axis sample. `threads`
// controls data-parallel quantization across samples; the result does not
// depend on it.
PackedActivation quantize_tensor(const Tensor& t, std::span<const uint8_t> bits_per_sample,
                                 uint32_t group_size, const QuantKey& key,
                                 unsigned threads = 1);
Tensor dequantize_tensor(const PackedActivation& p);

struct GroupRanges {
  size_t groups_per_sample = 0;
  std::vector<float> ranges;            // exact max - min, sample-major
  std::vector<double> sample_range_sq;  // sum_i R_ni^2 per sample
};

GroupRanges measure_group_ranges(const Tensor& t, uint32_t group_size);

// Wire format: "ACTN", version 0x01, then little-endian u32 group size,
// u32 sample count, u32 elements per sample, u8 bits per sample, (R, Z)
// bfloat16 pairs in sample-major group order, payload bytes. Deserialization
// restores the shape as [samples, elements per sample].
std::vector<uint8_t> serialize(const PackedActivation& p);
PackedActivation deserialize(std::span<const uint8_t> bytes);

}  // namespace actc
