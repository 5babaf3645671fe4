// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>

#include "actc/bfloat16.hpp"
#include "actc/bitpack.hpp"
#include "actc/quantize.hpp"
#include "actc/rng.hpp"
#include "test_util.hpp"

namespace actc {
namespace {

using testing::MeanAccumulator;
using testing::random_tensor;

// Known-answer vectors published with the Random123 reference implementation.
TEST(Philox, KnownAnswers) {
  EXPECT_EQ(philox4x32({0, 0, 0, 0}, {0, 0}),
            (std::array<uint32_t, 4>{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
  EXPECT_EQ(philox4x32({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff},
                       {0xffffffff, 0xffffffff}),
            (std::array<uint32_t, 4>{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
  EXPECT_EQ(philox4x32({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344},
                       {0xa4093822, 0x299f31d0}),
            (std::array<uint32_t, 4>{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(QuantRng, SameKeySameDraws) {
  QuantKey key{42, 3, 1, 0};
  QuantRng a(key, 7), b(key, 7), c(key, 8);
  bool differs = false;
  for (int i = 0; i < 10; ++i) {
    const double x = a.next_uniform();
    EXPECT_EQ(x, b.next_uniform());
    differs = differs || x != c.next_uniform();
    EXPECT_GT(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
  EXPECT_TRUE(differs);
}

TEST(QuantRng, StreamsAreIndependent) {
  QuantRng a(QuantKey{1, 0, 0, 0}, 0), b(QuantKey{1, 0, 0, 1}, 0);
  EXPECT_NE(a.next_uniform(), b.next_uniform());
}

TEST(QuantRng, UniformMoments) {
  QuantRng r(QuantKey{5, 0, 0, 0}, 0);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = r.next_uniform();
    s += u;
    s2 += u * u;
  }
  EXPECT_NEAR(s / n, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12.0, 1e-3);
}

TEST(BitPack, ThreeTwoBitCodes) {
  const std::vector<uint8_t> codes = {1, 2, 3};
  EXPECT_EQ(pack_codes(codes, 2), std::vector<uint8_t>{0x39});
}

TEST(BitPack, SingleOneBitCode) {
  const std::vector<uint8_t> codes = {1};
  EXPECT_EQ(pack_codes(codes, 1), std::vector<uint8_t>{0x01});
}

TEST(BitPack, RoundTripAllWidths) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const unsigned bits = 1 + trial % 8;
    const size_t n = 1 + rng() % 300;
    std::vector<uint8_t> codes(n);
    for (auto& c : codes) c = uint8_t(rng() & ((1u << bits) - 1));
    const auto bytes = pack_codes(codes, bits);
    ASSERT_EQ(bytes.size(), (n * bits + 7) / 8);
    ASSERT_EQ(unpack_codes(bytes, bits, n), codes);
  }
}

TEST(BitPack, TruncatedStreamThrows) {
  const std::vector<uint8_t> bytes = {0xff};
  EXPECT_THROW(unpack_codes(bytes, 3, 3), std::out_of_range);
}

TEST(BitPack, CodeTooWideThrows) {
  const std::vector<uint8_t> codes = {4};
  EXPECT_THROW(pack_codes(codes, 2), std::invalid_argument);
  EXPECT_THROW(pack_codes(codes, 9), std::invalid_argument);
}

TEST(BFloat16, DirectedRoundingBracketsValue) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 100.0);
  for (int i = 0; i < 10000; ++i) {
    const double v = n(rng);
    const float lo = bf16_to_float(bf16_round_down(v));
    const float hi = bf16_to_float(bf16_round_up(std::abs(v)));
    EXPECT_LE(double(lo), v);
    EXPECT_GE(double(hi), std::abs(v));
    // Within one bfloat16 ulp (8 significand bits).
    EXPECT_LE(v - lo, std::abs(v) / 128.0 + 1e-30);
    EXPECT_LE(hi - std::abs(v), std::abs(v) / 128.0 + 1e-30);
  }
  EXPECT_EQ(bf16_to_float(bf16_round_down(3.0)), 3.0f);
  EXPECT_EQ(bf16_to_float(bf16_round_up(3.0)), 3.0f);
  EXPECT_EQ(bf16_to_float(bf16_round_down(-0.75)), -0.75f);
}

TEST(QuantizeGroup, GridValuesAreExact) {
  const std::vector<float> v = {0, 1, 2, 3};
  for (uint32_t g = 0; g < 20; ++g) {
    QuantRng rng(QuantKey{g, 0, 0, 0}, g);
    const auto q = quantize_group(v, 2, rng);
    EXPECT_EQ(q.codes, (std::vector<uint8_t>{0, 1, 2, 3}));
    EXPECT_EQ(q.meta.range(), 3.0f);
    EXPECT_EQ(q.meta.zero(), 0.0f);
  }
}

TEST(QuantizeGroup, ConstantGroup) {
  const std::vector<float> v = {5, 5, 5, 5};
  for (int bits = 1; bits <= 8; ++bits) {
    QuantRng rng(QuantKey{}, 0);
    const auto q = quantize_group(v, bits, rng);
    EXPECT_EQ(q.meta.range(), 0.0f);
    EXPECT_EQ(q.meta.zero(), 5.0f);
    EXPECT_EQ(q.codes, (std::vector<uint8_t>(4, 0)));
    EXPECT_EQ(dequantize_group(q.codes, q.meta, bits), v);
  }
}

TEST(QuantizeGroup, EmptyAndBadBitsThrow) {
  QuantRng rng(QuantKey{}, 0);
  EXPECT_THROW(quantize_group({}, 2, rng), std::invalid_argument);
  const std::vector<float> v = {1, 2};
  EXPECT_THROW(quantize_group(v, 0, rng), std::invalid_argument);
  EXPECT_THROW(quantize_group(v, 9, rng), std::invalid_argument);
}

TEST(QuantizeGroup, HalfRoundsToHalfOnAverage) {
  const std::vector<float> v = {0.5f};
  const auto meta = GroupMeta::from_floats(1.0f, 0.0f);
  double sum = 0.0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    QuantRng rng(QuantKey{9, uint32_t(i), 0, 0}, 0);
    const auto c = quantize_group_with_meta(v, 1, meta, rng);
    sum += dequantize_group(c, meta, 1)[0];
  }
  EXPECT_NEAR(sum / draws, 0.5, 0.01);
}

TEST(DequantizeGroup, Examples) {
  const std::vector<uint8_t> codes = {0, 1, 2, 3};
  EXPECT_EQ(dequantize_group(codes, GroupMeta::from_floats(3, 0), 2),
            (std::vector<float>{0, 1, 2, 3}));
  const std::vector<uint8_t> zero = {0};
  EXPECT_EQ(dequantize_group(zero, GroupMeta::from_floats(0, 5), 3), std::vector<float>{5});
  const std::vector<uint8_t> bad = {4};
  EXPECT_THROW(dequantize_group(bad, GroupMeta::from_floats(3, 0), 2), std::invalid_argument);
}

TEST(QuantizeTensor, RoundTripIsUnbiased) {
  const Tensor t = random_tensor({3, 40}, 21, -2.0, 3.0);
  MeanAccumulator acc(t.numel());
  const std::vector<uint8_t> bits = {1, 2, 3};
  for (uint32_t s = 0; s < 10000; ++s) {
    const auto p = quantize_tensor(t, bits, 16, QuantKey{77, s, 0, 0});
    acc.add(dequantize_tensor(p).data());
  }
  for (size_t i = 0; i < t.numel(); ++i) {
    EXPECT_NEAR(acc.mean(i), t[i], 4.0 * acc.std_error(i) + 1e-6) << "element " << i;
  }
}

TEST(QuantizeTensor, SingleGroupExact) {
  const Tensor t = Tensor::from({1, 4}, {0, 1, 2, 3});
  const std::vector<uint8_t> bits = {2};
  const auto p = quantize_tensor(t, bits, 4, QuantKey{});
  EXPECT_EQ(p.meta.size(), 1u);
  EXPECT_EQ(dequantize_tensor(p), t);
}

TEST(QuantizeTensor, PerSampleWidths) {
  const Tensor t = random_tensor({2, 4}, 5);
  const std::vector<uint8_t> bits = {1, 8};
  const auto p = quantize_tensor(t, bits, 4, QuantKey{});
  EXPECT_EQ(p.bits, bits);
  EXPECT_EQ(p.payload_bits(), 4u * 1 + 4u * 8);
  EXPECT_EQ(p.payload.size(), 5u);
  const auto codes0 = unpack_codes(p.payload, 1, 4);
  for (auto c : codes0) EXPECT_LE(c, 1);
}

TEST(QuantizeTensor, RestoresShapeAndRaggedGroups) {
  const Tensor t = random_tensor({2, 3, 5, 7}, 8);
  const std::vector<uint8_t> bits = {3, 5};
  const auto p = quantize_tensor(t, bits, 16, QuantKey{});
  EXPECT_EQ(p.groups_per_sample(), 7u);  // ceil(105 / 16)
  EXPECT_EQ(p.meta.size(), 14u);
  EXPECT_EQ(p.payload_bits(), 105u * 3 + 105u * 5);
  EXPECT_EQ(p.metadata_bits(), 14u * 32);
  const Tensor r = dequantize_tensor(p);
  EXPECT_EQ(r.shape(), t.shape());
  for (size_t i = 0; i < t.numel(); ++i) {
    EXPECT_NEAR(r[i], t[i], 2.0 / 7.0 * 1.01);
  }
}

TEST(QuantizeTensor, BadBitsThrow) {
  const Tensor t = random_tensor({2, 4}, 5);
  const std::vector<uint8_t> zero = {0, 2};
  const std::vector<uint8_t> nine = {9, 2};
  const std::vector<uint8_t> short_bits = {2};
  EXPECT_THROW(quantize_tensor(t, zero, 4, QuantKey{}), std::invalid_argument);
  EXPECT_THROW(quantize_tensor(t, nine, 4, QuantKey{}), std::invalid_argument);
  EXPECT_THROW(quantize_tensor(t, short_bits, 4, QuantKey{}), std::invalid_argument);
}

TEST(QuantizeTensor, ThreadCountDoesNotChangeResult) {
  const Tensor t = random_tensor({16, 300}, 4);
  std::vector<uint8_t> bits(16);
  for (size_t i = 0; i < bits.size(); ++i) bits[i] = uint8_t(1 + i % 8);
  const auto a = quantize_tensor(t, bits, 64, QuantKey{1, 2, 3, 0}, 1);
  const auto b = quantize_tensor(t, bits, 64, QuantKey{1, 2, 3, 0}, 4);
  EXPECT_EQ(serialize(a), serialize(b));
}

// Per-element variance of uniform [0, 1) data at 2 bits against R^2 / (6 B^2),
// using the stored per-group ranges.
TEST(QuantizeTensor, VarianceLaw) {
  const Tensor t = random_tensor({4, 1024}, 13, 0.0, 1.0);
  const std::vector<uint8_t> bits(4, 2);
  const int draws = 2000;
  double sq = 0.0;
  PackedActivation first;
  for (int s = 0; s < draws; ++s) {
    const auto p = quantize_tensor(t, bits, 256, QuantKey{3, uint32_t(s), 0, 0});
    const Tensor r = dequantize_tensor(p);
    for (size_t i = 0; i < t.numel(); ++i) sq += double(r[i] - t[i]) * (r[i] - t[i]);
    if (s == 0) first = p;
  }
  double predicted = 0.0;
  for (const auto& m : first.meta) predicted += 256.0 * m.range() * m.range() / (6.0 * 9.0);
  const double measured = sq / draws;
  EXPECT_NEAR(measured / predicted, 1.0, 0.1);
  EXPECT_NEAR(measured / double(t.numel()), 0.0185, 0.0185 * 0.1);
}

TEST(QuantizeTensor, HalvingBinsQuadruplesVariance) {
  const Tensor t = random_tensor({2, 1024}, 17, 0.0, 1.0);
  auto variance = [&](uint8_t b) {
    const std::vector<uint8_t> bits(2, b);
    double sq = 0.0;
    for (uint32_t s = 0; s < 1000; ++s) {
      const Tensor r = dequantize_tensor(quantize_tensor(t, bits, 256, QuantKey{4, s, 0, 0}));
      for (size_t i = 0; i < t.numel(); ++i) sq += double(r[i] - t[i]) * (r[i] - t[i]);
    }
    return sq;
  };
  // B = 7 vs B = 3: variance ratio (7/3)^2.
  EXPECT_NEAR(variance(2) / variance(3), 49.0 / 9.0, 49.0 / 9.0 * 0.1);
}

TEST(GroupRanges, Examples) {
  const auto one = measure_group_ranges(Tensor::from({1, 4}, {0, 1, 2, 3}), 4);
  EXPECT_EQ(one.ranges, std::vector<float>{3});
  EXPECT_EQ(one.sample_range_sq, std::vector<double>{9});
  const auto two = measure_group_ranges(Tensor::from({1, 4}, {0, 2, 1, 5}), 2);
  EXPECT_EQ(two.ranges, (std::vector<float>{2, 4}));
  EXPECT_EQ(two.sample_range_sq, std::vector<double>{20});
  const auto flat = measure_group_ranges(Tensor({3, 10}, 2.5f), 4);
  for (float r : flat.ranges) EXPECT_EQ(r, 0.0f);
}

TEST(Serialize, RoundTripIsByteIdentical) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const size_t n = 1 + rng() % 4, d = 1 + rng() % 70;
    const Tensor t = random_tensor({n, d}, rng(), -5.0, 5.0);
    std::vector<uint8_t> bits(n);
    for (size_t i = 0; i < n; ++i) bits[i] = uint8_t(1 + (trial + i) % 8);
    const auto p = quantize_tensor(t, bits, uint32_t(1 + rng() % 32), QuantKey{rng(), 0, 0, 0});
    const auto bytes = serialize(p);
    ASSERT_EQ(bytes.size(), p.serialized_size());
    const auto back = deserialize(bytes);
    ASSERT_EQ(serialize(back), bytes);
    ASSERT_EQ(dequantize_tensor(back).data().size(), t.numel());
  }
}

TEST(Serialize, HeaderLayout) {
  const std::vector<uint8_t> bits = {2};
  const auto p = quantize_tensor(Tensor::from({1, 4}, {0, 1, 2, 3}), bits, 4, QuantKey{});
  const auto b = serialize(p);
  const std::vector<uint8_t> expected = {'A', 'C', 'T', 'N', 0x01, 4, 0, 0, 0, 1, 0, 0, 0, 4, 0,
                                         0, 0, 2,
                                         // R = 3.0 (0x4040), Z = 0.0
                                         0x40, 0x40, 0x00, 0x00,
                                         // codes 0,1,2,3 at 2 bits
                                         0xe4};
  EXPECT_EQ(b, expected);
}

TEST(Serialize, MalformedInputThrows) {
  const std::vector<uint8_t> bits = {3, 4};
  const auto good = serialize(quantize_tensor(random_tensor({2, 9}, 1), bits, 4, QuantKey{}));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize(bad_magic), std::invalid_argument);
  auto bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW(deserialize(bad_version), std::invalid_argument);
  auto bad_bits = good;
  bad_bits[17] = 9;
  EXPECT_THROW(deserialize(bad_bits), std::invalid_argument);
  const std::span<const uint8_t> truncated(good.data(), good.size() - 1);
  EXPECT_THROW(deserialize(truncated), std::invalid_argument);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(deserialize(trailing), std::invalid_argument);
}

// Golden files pin the wire format. Regenerate with ACTC_UPDATE_GOLDEN=1.
struct GoldenCase {
  const char* name;
  uint8_t bits;
};

TEST(Serialize, GoldenFiles) {
  const bool update = std::getenv("ACTC_UPDATE_GOLDEN") != nullptr;
  for (uint8_t b = 1; b <= 8; ++b) {
    const Tensor t = random_tensor({3, 300}, 1000 + b, -3.0, 2.0);
    const std::vector<uint8_t> bits = {b, uint8_t(b == 8 ? 1 : b + 1), b};
    const auto bytes = serialize(quantize_tensor(t, bits, 256, QuantKey{2024, b, 1, 0}));
    const std::string path = std::string(ACTC_GOLDEN_DIR) + "/packed_b" + std::to_string(b) + ".actn";
    if (update) {
      std::ofstream(path, std::ios::binary)
          .write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    }
    std::ifstream f(path, std::ios::binary);
    ASSERT_TRUE(f) << path;
    const std::vector<uint8_t> golden(std::istreambuf_iterator<char>(f), {});
    EXPECT_EQ(golden, bytes) << path;
    EXPECT_EQ(serialize(deserialize(golden)), golden);
  }
}

}  // namespace
}  // namespace actc
