#include "fmoe/wire.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "fmoe/errors.hpp"

namespace fmoe {

namespace {

void store_u32(std::byte* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFF);
}

void store_u64(std::byte* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFF);
}

std::uint32_t load_u32(const std::byte* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t load_u64(const std::byte* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void encode_header(const FrameHeader& header, std::span<std::byte, kFrameHeaderSize> out) {
  std::memcpy(out.data(), kFrameMagic.data(), 4);
  out[4] = static_cast<std::byte>(kWireVersion);
  out[5] = static_cast<std::byte>(header.type);
  store_u32(out.data() + 6, header.src_rank);
  store_u32(out.data() + 10, header.tag);
  store_u64(out.data() + 14, header.payload_len);
}

std::vector<std::byte> encode_frame(const Frame& frame) {
  std::vector<std::byte> out(kFrameHeaderSize + frame.payload.size());
  FrameHeader header = frame.header;
  header.payload_len = frame.payload.size();
  encode_header(header, std::span<std::byte, kFrameHeaderSize>(out.data(), kFrameHeaderSize));
  std::memcpy(out.data() + kFrameHeaderSize, frame.payload.data(), frame.payload.size());
  return out;
}

FrameHeader decode_header(std::span<const std::byte, kFrameHeaderSize> bytes) {
  if (std::memcmp(bytes.data(), kFrameMagic.data(), 4) != 0)
    throw ProtocolError("frame: bad magic");
  if (bytes[4] != static_cast<std::byte>(kWireVersion))
    throw ProtocolError("frame: unsupported version " +
                        std::to_string(static_cast<unsigned>(bytes[4])));
  const auto type = static_cast<std::uint8_t>(bytes[5]);
  if (type < 0x01 || type > 0x04)
    throw ProtocolError("frame: unknown msg_type " + std::to_string(type));
  FrameHeader header;
  header.type = static_cast<MsgType>(type);
  header.src_rank = load_u32(bytes.data() + 6);
  header.tag = load_u32(bytes.data() + 10);
  header.payload_len = load_u64(bytes.data() + 14);
  return header;
}

Frame decode_frame(std::span<const std::byte> bytes) {
  if (bytes.size() < kFrameHeaderSize) throw ProtocolError("frame: truncated header");
  Frame frame;
  frame.header = decode_header(
      std::span<const std::byte, kFrameHeaderSize>(bytes.data(), kFrameHeaderSize));
  if (bytes.size() != kFrameHeaderSize + frame.header.payload_len)
    throw ProtocolError("frame: payload length mismatch");
  frame.payload.assign(bytes.begin() + kFrameHeaderSize, bytes.end());
  return frame;
}

std::vector<std::byte> pack_counts(std::span<const std::int64_t> counts) {
  std::vector<std::byte> out(counts.size() * 8);
  for (std::size_t i = 0; i < counts.size(); ++i)
    store_u64(out.data() + 8 * i, static_cast<std::uint64_t>(counts[i]));
  return out;
}

std::vector<std::int64_t> unpack_counts(std::span<const std::byte> payload) {
  if (payload.size() % 8 != 0) throw ProtocolError("counts payload not a multiple of 8");
  std::vector<std::int64_t> out(payload.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::int64_t>(load_u64(payload.data() + 8 * i));
  return out;
}

std::vector<std::byte> pack_rows(const Matrix& m, std::size_t row0, std::size_t nrows) {
  std::vector<std::byte> out(nrows * m.cols() * 8);
  for (std::size_t i = 0; i < nrows * m.cols(); ++i)
    store_u64(out.data() + 8 * i, std::bit_cast<std::uint64_t>(m.row_data(row0)[i]));
  return out;
}

void unpack_rows(std::span<const std::byte> payload, Matrix& dst, std::size_t row0,
                 std::size_t nrows) {
  if (payload.size() != nrows * dst.cols() * 8)
    throw ProtocolError("row payload size mismatch: got " + std::to_string(payload.size()) +
                        " bytes, expected " + std::to_string(nrows * dst.cols() * 8));
  for (std::size_t i = 0; i < nrows * dst.cols(); ++i)
    dst.row_data(row0)[i] = std::bit_cast<double>(load_u64(payload.data() + 8 * i));
}

}  // namespace fmoe
