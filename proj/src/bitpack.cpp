// SPDX-License-Identifier: Apache-2.0
#include "actc/bitpack.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace actc {

void BitWriter::put(uint32_t code, unsigned width) {
  acc_ |= uint64_t(code) << pending_;
  pending_ += width;
  bits_ += width;
  while (pending_ >= 8) {
    out_.push_back(uint8_t(acc_));
    acc_ >>= 8;
    pending_ -= 8;
  }
}

void BitWriter::flush() {
  if (pending_ > 0) {
    out_.push_back(uint8_t(acc_));
    acc_ = 0;
    pending_ = 0;
  }
}

BitReader::BitReader(std::span<const uint8_t> in, uint64_t bit_offset)
    : in_(in), pos_(bit_offset) {}

uint32_t BitReader::get(unsigned width) {
  if (pos_ + width > uint64_t(in_.size()) * 8) {
    throw std::out_of_range("bitstream truncated at bit " + std::to_string(pos_));
  }
  uint32_t v = 0;
  unsigned got = 0;
  while (got < width) {
    const uint64_t byte = pos_ >> 3;
    const unsigned shift = unsigned(pos_ & 7);
    const unsigned take = std::min(width - got, 8 - shift);
    const uint32_t chunk = (uint32_t(in_[byte]) >> shift) & ((1u << take) - 1u);
    v |= chunk << got;
    got += take;
    pos_ += take;
  }
  return v;
}

std::vector<uint8_t> pack_codes(std::span<const uint8_t> codes, unsigned bits) {
  if (bits < 1 || bits > 8) throw std::invalid_argument("code width must be in [1, 8]");
  std::vector<uint8_t> out;
  out.reserve((codes.size() * bits + 7) / 8);
  {
    BitWriter w(out);
    const uint32_t limit = (1u << bits) - 1u;
    for (uint8_t c : codes) {
      if (c > limit) {
        throw std::invalid_argument("code " + std::to_string(c) + " does not fit in " +
                                    std::to_string(bits) + " bits");
      }
      w.put(c, bits);
    }
  }
  return out;
}

std::vector<uint8_t> unpack_codes(std::span<const uint8_t> bytes, unsigned bits, size_t count) {
  if (bits < 1 || bits > 8) throw std::invalid_argument("code width must be in [1, 8]");
  std::vector<uint8_t> out(count);
  BitReader r(bytes);
  for (size_t i = 0; i < count; ++i) out[i] = uint8_t(r.get(bits));
  return out;
}

}  // namespace actc
