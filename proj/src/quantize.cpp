// SPDX-License-Identifier: Apache-2.0
#include "actc/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>

#include "actc/bfloat16.hpp"
#include "actc/bitpack.hpp"

namespace actc {

uint16_t bf16_round_down(double v) {
  const float f = float(v);
  const float lo = (double(f) > v) ? std::nextafter(f, -std::numeric_limits<float>::infinity()) : f;
  uint16_t b = bf16_truncate(lo);
  // Truncation moves negative values toward zero; step one ulp away from it.
  if (double(bf16_to_float(b)) > v) b = uint16_t(b + 1);
  return b;
}

uint16_t bf16_round_up(double v) {
  const float f = float(v);
  const float hi = (double(f) < v) ? std::nextafter(f, std::numeric_limits<float>::infinity()) : f;
  uint16_t b = bf16_truncate(hi);
  if (double(bf16_to_float(b)) < v) b = uint16_t(b + 1);
  return b;
}

namespace {

void check_bits(int bits) {
  if (bits < kMinBits || bits > kMaxBits) {
    throw std::invalid_argument("bit width " + std::to_string(bits) + " outside [1, 8]");
  }
}

inline uint8_t round_stochastic(double h, double zero, double range, double bins,
                                QuantRng& rng) {
  // Every group consumes one draw per element, also for zero-range groups,
  // so draw positions stay aligned with element indices.
  const double r = rng.next_uniform();
  if (range == 0.0) return 0;
  double u = bins * (h - zero) / range;
  u = std::clamp(u, 0.0, bins);
  const double fl = std::floor(u);
  uint32_t code = uint32_t(fl);
  if (r < u - fl) ++code;
  return uint8_t(std::min<uint32_t>(code, uint32_t(bins)));
}

}  // namespace

float GroupMeta::range() const { return bf16_to_float(range_bits); }
float GroupMeta::zero() const { return bf16_to_float(zero_bits); }

GroupMeta GroupMeta::from_values(std::span<const float> values) {
  if (values.empty()) throw std::invalid_argument("cannot quantize an empty group");
  float lo = values[0], hi = values[0];
  for (float v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("group contains a non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  GroupMeta m;
  m.zero_bits = bf16_round_down(lo);
  m.range_bits = bf16_round_up(double(hi) - double(m.zero()));
  return m;
}

GroupMeta GroupMeta::from_floats(float range, float zero) {
  if (!(range >= 0.0f) || !std::isfinite(range) || !std::isfinite(zero)) {
    throw std::invalid_argument("group range must be finite and nonnegative");
  }
  return GroupMeta{bf16_round_up(range), bf16_round_down(zero)};
}

QuantizedGroup quantize_group(std::span<const float> values, int bits, QuantRng& rng) {
  check_bits(bits);
  QuantizedGroup g;
  g.meta = GroupMeta::from_values(values);
  g.codes = quantize_group_with_meta(values, bits, g.meta, rng);
  return g;
}

std::vector<uint8_t> quantize_group_with_meta(std::span<const float> values, int bits,
                                              const GroupMeta& meta, QuantRng& rng) {
  check_bits(bits);
  if (values.empty()) throw std::invalid_argument("cannot quantize an empty group");
  const double bins = bins_for_bits(bits);
  const double range = meta.range();
  const double zero = meta.zero();
  std::vector<uint8_t> codes(values.size());
  for (size_t k = 0; k < values.size(); ++k) {
    codes[k] = round_stochastic(values[k], zero, range, bins, rng);
  }
  return codes;
}

std::vector<float> dequantize_group(std::span<const uint8_t> codes, const GroupMeta& meta,
                                    int bits) {
  check_bits(bits);
  const int bins = bins_for_bits(bits);
  const double scale = double(meta.range()) / bins;
  const double zero = meta.zero();
  std::vector<float> out(codes.size());
  for (size_t k = 0; k < codes.size(); ++k) {
    if (codes[k] > bins) {
      throw std::invalid_argument("code " + std::to_string(codes[k]) + " exceeds " +
                                  std::to_string(bins) + " for " + std::to_string(bits) +
                                  "-bit group");
    }
    out[k] = float(codes[k] * scale + zero);
  }
  return out;
}

size_t PackedActivation::sample_size() const {
  return samples() == 0 ? 0 : shape_numel(shape) / samples();
}

size_t PackedActivation::groups_per_sample() const {
  return (sample_size() + group_size - 1) / group_size;
}

uint64_t PackedActivation::payload_bits() const {
  uint64_t total = 0;
  for (uint8_t b : bits) total += uint64_t(b) * sample_size();
  return total;
}

uint64_t PackedActivation::serialized_size() const {
  return 4 + 1 + 12 + bits.size() + 4 * meta.size() + payload.size();
}

PackedActivation quantize_tensor(const Tensor& t, std::span<const uint8_t> bits_per_sample,
                                 uint32_t group_size, const QuantKey& key, unsigned threads) {
  if (group_size == 0) throw std::invalid_argument("group size must be positive");
  if (t.rank() < 1 || t.empty()) throw std::invalid_argument("cannot quantize an empty tensor");
  const size_t n_samples = t.samples();
  if (bits_per_sample.size() != n_samples) {
    throw std::invalid_argument("expected " + std::to_string(n_samples) +
                                " per-sample bit widths, got " +
                                std::to_string(bits_per_sample.size()));
  }
  for (uint8_t b : bits_per_sample) check_bits(b);

  PackedActivation p;
  p.group_size = group_size;
  p.shape = t.shape();
  p.bits.assign(bits_per_sample.begin(), bits_per_sample.end());
  const size_t d = t.sample_size();
  const size_t gps = (d + group_size - 1) / group_size;
  p.meta.resize(n_samples * gps);
  std::vector<uint8_t> codes(t.numel());

  auto work = [&](size_t n_begin, size_t n_end) {
    for (size_t n = n_begin; n < n_end; ++n) {
      auto x = t.sample(n);
      for (size_t i = 0; i < gps; ++i) {
        const size_t lo = i * group_size;
        const size_t len = std::min<size_t>(group_size, d - lo);
        const size_t g = n * gps + i;
        QuantRng rng(key, uint32_t(g));
        auto values = x.subspan(lo, len);
        const GroupMeta meta = GroupMeta::from_values(values);
        p.meta[g] = meta;
        auto c = quantize_group_with_meta(values, p.bits[n], meta, rng);
        std::copy(c.begin(), c.end(), codes.begin() + std::ptrdiff_t(n * d + lo));
      }
    }
  };

  const unsigned workers = std::max(1u, std::min<unsigned>(threads, unsigned(n_samples)));
  if (workers == 1) {
    work(0, n_samples);
  } else {
    std::vector<std::jthread> pool;
    const size_t chunk = (n_samples + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const size_t b = w * chunk, e = std::min(n_samples, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }

  p.payload.reserve((p.payload_bits() + 7) / 8);
  {
    BitWriter w(p.payload);
    for (size_t n = 0; n < n_samples; ++n) {
      for (size_t k = 0; k < d; ++k) w.put(codes[n * d + k], p.bits[n]);
    }
  }
  return p;
}

Tensor dequantize_tensor(const PackedActivation& p) {
  const size_t d = p.sample_size();
  const size_t gps = p.groups_per_sample();
  if (p.meta.size() != p.samples() * gps) {
    throw std::invalid_argument("packed activation has inconsistent group metadata");
  }
  std::vector<float> out(shape_numel(p.shape));
  BitReader r(p.payload);
  std::vector<uint8_t> codes;
  for (size_t n = 0; n < p.samples(); ++n) {
    const int bits = p.bits[n];
    for (size_t i = 0; i < gps; ++i) {
      const size_t lo = i * p.group_size;
      const size_t len = std::min<size_t>(p.group_size, d - lo);
      codes.resize(len);
      for (size_t k = 0; k < len; ++k) codes[k] = uint8_t(r.get(unsigned(bits)));
      auto h = dequantize_group(codes, p.meta[n * gps + i], bits);
      std::copy(h.begin(), h.end(), out.begin() + std::ptrdiff_t(n * d + lo));
    }
  }
  return Tensor(p.shape, std::move(out));
}

GroupRanges measure_group_ranges(const Tensor& t, uint32_t group_size) {
  if (group_size == 0) throw std::invalid_argument("group size must be positive");
  GroupRanges out;
  const size_t d = t.sample_size();
  out.groups_per_sample = (d + group_size - 1) / group_size;
  out.ranges.reserve(t.samples() * out.groups_per_sample);
  out.sample_range_sq.assign(t.samples(), 0.0);
  for (size_t n = 0; n < t.samples(); ++n) {
    auto x = t.sample(n);
    for (size_t lo = 0; lo < d; lo += group_size) {
      const size_t len = std::min<size_t>(group_size, d - lo);
      auto [mn, mx] = std::minmax_element(x.begin() + std::ptrdiff_t(lo),
                                          x.begin() + std::ptrdiff_t(lo + len));
      const float r = float(double(*mx) - double(*mn));
      out.ranges.push_back(r);
      out.sample_range_sq[n] += double(r) * double(r);
    }
  }
  return out;
}

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
}

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
}

class ByteCursor {
 public:
  explicit ByteCursor(std::span<const uint8_t> in) : in_(in) {}

  void need(size_t n, const char* what) const {
    if (pos_ + n > in_.size()) {
      throw std::invalid_argument(std::string("packed activation truncated reading ") + what +
                                  " at byte " + std::to_string(pos_));
    }
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return in_[pos_++];
  }
  uint16_t u16(const char* what) {
    need(2, what);
    const uint16_t v = uint16_t(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  size_t pos() const { return pos_; }
  size_t remaining() const { return in_.size() - pos_; }
  std::span<const uint8_t> take(size_t n, const char* what) {
    need(n, what);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const uint8_t> in_;
  size_t pos_ = 0;
};

constexpr uint8_t kFormatVersion = 0x01;

}  // namespace

std::vector<uint8_t> serialize(const PackedActivation& p) {
  std::vector<uint8_t> out;
  out.reserve(p.serialized_size());
  for (char ch : {'A', 'C', 'T', 'N'}) out.push_back(uint8_t(ch));
  out.push_back(kFormatVersion);
  put_u32(out, p.group_size);
  put_u32(out, uint32_t(p.samples()));
  put_u32(out, uint32_t(p.sample_size()));
  out.insert(out.end(), p.bits.begin(), p.bits.end());
  for (const GroupMeta& m : p.meta) {
    put_u16(out, m.range_bits);
    put_u16(out, m.zero_bits);
  }
  out.insert(out.end(), p.payload.begin(), p.payload.end());
  return out;
}

PackedActivation deserialize(std::span<const uint8_t> bytes) {
  ByteCursor c(bytes);
  auto magic = c.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), "ACTN")) {
    throw std::invalid_argument("bad magic at byte 0");
  }
  const uint8_t version = c.u8("version");
  if (version != kFormatVersion) {
    throw std::invalid_argument("unsupported format version " + std::to_string(version) +
                                " at byte 4");
  }
  PackedActivation p;
  p.group_size = c.u32("group size");
  if (p.group_size == 0) throw std::invalid_argument("zero group size at byte 5");
  const uint32_t n = c.u32("sample count");
  const uint32_t d = c.u32("sample size");
  if (n == 0 || d == 0) throw std::invalid_argument("empty packed activation at byte 9");
  p.shape = {n, d};
  auto bits = c.take(n, "bit widths");
  p.bits.assign(bits.begin(), bits.end());
  for (size_t i = 0; i < p.bits.size(); ++i) {
    if (p.bits[i] < kMinBits || p.bits[i] > kMaxBits) {
      throw std::invalid_argument("bit width out of range at byte " + std::to_string(17 + i));
    }
  }
  const size_t groups = size_t(n) * p.groups_per_sample();
  p.meta.resize(groups);
  for (auto& m : p.meta) {
    m.range_bits = c.u16("group range");
    m.zero_bits = c.u16("group zero point");
  }
  const size_t payload_bytes = (p.payload_bits() + 7) / 8;
  auto payload = c.take(payload_bytes, "payload");
  p.payload.assign(payload.begin(), payload.end());
  if (c.remaining() != 0) {
    throw std::invalid_argument("trailing bytes after payload at byte " + std::to_string(c.pos()));
  }
  return p;
}

}  // namespace actc
