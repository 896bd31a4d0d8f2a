#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fmoe/matrix.hpp"

namespace fmoe {

// Every message on the wire is one frame:
//   magic       4 bytes ASCII "FMOE"
//   version     1 byte, 0x01
//   msg_type    1 byte
//   src_rank    u32 little-endian
//   tag         u32 little-endian (iteration / phase id)
//   payload_len u64 little-endian byte count
//   payload     counts as u64 LE array, data as f64 LE row-major rows
enum class MsgType : std::uint8_t {
  Counts = 0x01,
  Data = 0x02,
  Allreduce = 0x03,
  Barrier = 0x04,
};

inline constexpr std::array<char, 4> kFrameMagic{'F', 'M', 'O', 'E'};
inline constexpr std::uint8_t kWireVersion = 0x01;
inline constexpr std::size_t kFrameHeaderSize = 4 + 1 + 1 + 4 + 4 + 8;

struct FrameHeader {
  MsgType type;
  std::uint32_t src_rank = 0;
  std::uint32_t tag = 0;
  std::uint64_t payload_len = 0;
};

struct Frame {
  FrameHeader header;
  std::vector<std::byte> payload;
};

std::vector<std::byte> encode_frame(const Frame& frame);
void encode_header(const FrameHeader& header, std::span<std::byte, kFrameHeaderSize> out);

// Throws ProtocolError on bad magic or version.
FrameHeader decode_header(std::span<const std::byte, kFrameHeaderSize> bytes);
// Decodes a whole frame from a contiguous buffer; length must match exactly.
Frame decode_frame(std::span<const std::byte> bytes);

// Payload helpers. Doubles travel as IEEE-754 bit patterns so a round trip is
// exact.
std::vector<std::byte> pack_counts(std::span<const std::int64_t> counts);
std::vector<std::int64_t> unpack_counts(std::span<const std::byte> payload);

std::vector<std::byte> pack_rows(const Matrix& m, std::size_t row0, std::size_t nrows);
void unpack_rows(std::span<const std::byte> payload, Matrix& dst, std::size_t row0,
                 std::size_t nrows);

}  // namespace fmoe
