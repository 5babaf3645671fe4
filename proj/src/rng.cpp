// SPDX-License-Identifier: Apache-2.0
#include "actc/rng.hpp"

namespace actc {

namespace {

constexpr uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(uint32_t a, uint32_t b, uint32_t& hi, uint32_t& lo) {
  const uint64_t p = uint64_t(a) * uint64_t(b);
  hi = uint32_t(p >> 32);
  lo = uint32_t(p);
}

}  // namespace

std::array<uint32_t, 4> philox4x32(std::array<uint32_t, 4> ctr, std::array<uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
    mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

QuantRng::QuantRng(const QuantKey& key, uint32_t group)
    : key_{uint32_t(key.seed), uint32_t(key.seed >> 32)},
      counter_{0u, group, (key.layer << 8) | key.stream, key.step} {}

void QuantRng::refill() {
  block_ = philox4x32(counter_, key_);
  ++counter_[0];
  lane_ = 0;
}

double QuantRng::next_uniform() {
  if (lane_ == 4) refill();
  const uint32_t u = block_[lane_++];
  return (double(u) + 0.5) * 0x1p-32;
}

}  // namespace actc
