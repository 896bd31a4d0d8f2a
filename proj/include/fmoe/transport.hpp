#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fmoe/wire.hpp"

namespace fmoe {

// Point-to-point frame transport between SPMD ranks. Frames between an
// ordered pair of ranks arrive in send order. Collectives agree on phase ids
// through next_tag(): every rank issues the same collective sequence, so the
// per-instance counters stay aligned without extra traffic.
class Transport {
public:
  virtual ~Transport() = default;

  virtual int rank() const = 0;
  virtual int world_size() const = 0;

  virtual void send_frame(int peer, MsgType type, std::uint32_t tag,
                          std::span<const std::byte> payload) = 0;
  // Blocks for the next frame from `peer`; throws ProtocolError when the
  // frame does not carry the expected type/tag.
  virtual std::vector<std::byte> recv_frame(int peer, MsgType expected_type,
                                            std::uint32_t expected_tag) = 0;

  virtual void barrier() = 0;

  std::uint32_t next_tag() { return tag_counter_++; }

private:
  std::uint32_t tag_counter_ = 1;
};

// Shared-memory world for single-process multi-rank runs (tests, in-process
// benchmarks). Frames still pass through the wire codec so both transports
// exercise the same encode/decode path.
class InProcWorld {
public:
  explicit InProcWorld(int world_size);
  ~InProcWorld();

  int world_size() const;
  // One transport per rank; each is used by that rank's thread.
  std::unique_ptr<Transport> transport(int rank);

  struct Shared;

private:
  std::shared_ptr<Shared> shared_;
};

struct HostPort {
  std::string host;
  std::uint16_t port = 0;
};

// One "host:port" per line, line index = rank.
std::vector<HostPort> parse_hostfile(const std::string& path);
std::vector<HostPort> localhost_endpoints(int world_size, std::uint16_t base_port);

// Full-mesh TCP transport. Every rank listens on its own endpoint, connects
// to all higher ranks and accepts from all lower ranks.
std::unique_ptr<Transport> tcp_connect(
    int rank, const std::vector<HostPort>& endpoints,
    std::chrono::milliseconds timeout = std::chrono::seconds(30));

}  // namespace fmoe
