#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cdre {

// MSB-first bit packing; the final byte is zero-padded.
class BitWriter {
 public:
  void put_bit(bool bit);
  void put_bits(std::uint32_t value, int count);
  // Unsigned exponential-Golomb.
  void put_ue(std::uint32_t value);
  // Signed exponential-Golomb: v > 0 -> 2v-1, v <= 0 -> -2v.
  void put_se(std::int32_t value);

  std::size_t bit_count() const { return bits_; }
  std::vector<std::uint8_t> finish();

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t bits_ = 0;
};

// Reads from a byte span; running past the end throws a data error naming
// the byte offset, prefixed by `context` ("malformed bitstream", ...).
class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> bytes, std::size_t byte_offset,
            std::string context);

  bool get_bit();
  std::uint32_t get_bits(int count);
  std::uint32_t get_ue();
  std::int32_t get_se();

  // Absolute byte offset of the next unread bit.
  std::size_t byte_position() const { return origin_ + bit_pos_ / 8; }
  // Bytes touched so far, counting a partially read byte.
  std::size_t bytes_consumed() const { return (bit_pos_ + 7) / 8; }

  [[noreturn]] void fail(const std::string& reason) const;

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t origin_;
  std::size_t bit_pos_ = 0;
  std::string context_;
};

void put_u16_be(std::vector<std::uint8_t>& out, std::uint32_t value);
std::uint32_t get_u16_be(std::span<const std::uint8_t> bytes, std::size_t offset);

} // namespace cdre
