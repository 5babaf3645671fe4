// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace actc {

// Appends fixed-width codes to an LSB-first bitstream: code k of width b
// occupies stream bits [k*b, (k+1)*b), low bit first.
class BitWriter {
 public:
  explicit BitWriter(std::vector<uint8_t>& out) : out_(out) {}
  ~BitWriter() { flush(); }

  void put(uint32_t code, unsigned width);
  void flush();
  uint64_t bits_written() const { return bits_; }

 private:
  std::vector<uint8_t>& out_;
  uint64_t acc_ = 0;
  unsigned pending_ = 0;
  uint64_t bits_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const uint8_t> in, uint64_t bit_offset = 0);

  // Throws std::out_of_range when the stream is exhausted.
  uint32_t get(unsigned width);
  uint64_t position() const { return pos_; }

 private:
  std::span<const uint8_t> in_;
  uint64_t pos_;
};

std::vector<uint8_t> pack_codes(std::span<const uint8_t> codes, unsigned bits);
std::vector<uint8_t> unpack_codes(std::span<const uint8_t> bytes, unsigned bits, size_t count);

}  // namespace actc
