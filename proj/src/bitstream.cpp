#include "cdre/bitstream.hpp"

#include "cdre/error.hpp"

namespace cdre {

void BitWriter::put_bit(bool bit) {
  if (bits_ % 8 == 0) bytes_.push_back(0);
  if (bit) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> (bits_ % 8));
  ++bits_;
}

void BitWriter::put_bits(std::uint32_t value, int count) {
  for (int i = count - 1; i >= 0; --i) put_bit((value >> i) & 1u);
}

void BitWriter::put_ue(std::uint32_t value) {
  const std::uint64_t v = static_cast<std::uint64_t>(value) + 1;
  int len = 0;
  while ((v >> len) > 1) ++len;
  for (int i = 0; i < len; ++i) put_bit(false);
  for (int i = len; i >= 0; --i) put_bit((v >> i) & 1u);
}

void BitWriter::put_se(std::int32_t value) {
  const std::int64_t v = value;
  put_ue(static_cast<std::uint32_t>(v > 0 ? 2 * v - 1 : -2 * v));
}

std::vector<std::uint8_t> BitWriter::finish() {
  bits_ = 0;
  return std::move(bytes_);
}

BitReader::BitReader(std::span<const std::uint8_t> bytes, std::size_t byte_offset,
                     std::string context)
    : bytes_(bytes), origin_(byte_offset), context_(std::move(context)) {}

void BitReader::fail(const std::string& reason) const {
  throw data_error(context_ + " at byte " + std::to_string(byte_position()) + ": " + reason);
}

bool BitReader::get_bit() {
  if (bit_pos_ / 8 >= bytes_.size()) fail("unexpected end of data");
  const bool bit = (bytes_[bit_pos_ / 8] >> (7 - bit_pos_ % 8)) & 1u;
  ++bit_pos_;
  return bit;
}

std::uint32_t BitReader::get_bits(int count) {
  std::uint32_t v = 0;
  for (int i = 0; i < count; ++i) v = (v << 1) | (get_bit() ? 1u : 0u);
  return v;
}

std::uint32_t BitReader::get_ue() {
  int zeros = 0;
  while (!get_bit()) {
    if (++zeros > 31) fail("exp-Golomb prefix too long");
  }
  const std::uint64_t v = (std::uint64_t{1} << zeros) | get_bits(zeros);
  return static_cast<std::uint32_t>(v - 1);
}

std::int32_t BitReader::get_se() {
  const std::uint32_t k = get_ue();
  if (k & 1u) return static_cast<std::int32_t>((k + 1) / 2);
  return -static_cast<std::int32_t>(k / 2);
}

void put_u16_be(std::vector<std::uint8_t>& out, std::uint32_t value) {
  out.push_back(static_cast<std::uint8_t>((value >> 8) & 0xffu));
  out.push_back(static_cast<std::uint8_t>(value & 0xffu));
}

std::uint32_t get_u16_be(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (static_cast<std::uint32_t>(bytes[offset]) << 8) | bytes[offset + 1];
}

} // namespace cdre
