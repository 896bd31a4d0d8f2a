#include <condition_variable>
#include <deque>
#include <mutex>
#include <string>

#include "fmoe/errors.hpp"
#include "fmoe/transport.hpp"

namespace fmoe {

namespace {

struct Mailbox {
  std::mutex mutex;
  std::condition_variable ready;
  std::deque<std::vector<std::byte>> frames;
};

}  // namespace

struct InProcWorld::Shared {
  int world_size = 0;
  std::vector<Mailbox> boxes;  // world * world, index src * world + dst

  // centralized generation barrier
  std::mutex barrier_mutex;
  std::condition_variable barrier_cv;
  int barrier_count = 0;
  std::uint64_t barrier_generation = 0;

  explicit Shared(int w) : world_size(w), boxes(static_cast<std::size_t>(w) * w) {}

  Mailbox& box(int src, int dst) {
    return boxes[static_cast<std::size_t>(src) * world_size + static_cast<std::size_t>(dst)];
  }
};

namespace {

class InProcTransport final : public Transport {
public:
  InProcTransport(std::shared_ptr<InProcWorld::Shared> shared, int rank)
      : shared_(std::move(shared)), rank_(rank) {}

  int rank() const override { return rank_; }
  int world_size() const override { return shared_->world_size; }

  void send_frame(int peer, MsgType type, std::uint32_t tag,
                  std::span<const std::byte> payload) override {
    check_peer(peer);
    Frame frame;
    frame.header = {type, static_cast<std::uint32_t>(rank_), tag, payload.size()};
    frame.payload.assign(payload.begin(), payload.end());
    auto bytes = encode_frame(frame);
    Mailbox& box = shared_->box(rank_, peer);
    {
      std::lock_guard<std::mutex> lock(box.mutex);
      box.frames.push_back(std::move(bytes));
    }
    box.ready.notify_one();
  }

  std::vector<std::byte> recv_frame(int peer, MsgType expected_type,
                                    std::uint32_t expected_tag) override {
    check_peer(peer);
    Mailbox& box = shared_->box(peer, rank_);
    std::vector<std::byte> bytes;
    {
      std::unique_lock<std::mutex> lock(box.mutex);
      box.ready.wait(lock, [&] { return !box.frames.empty(); });
      bytes = std::move(box.frames.front());
      box.frames.pop_front();
    }
    Frame frame = decode_frame(bytes);
    if (frame.header.type != expected_type || frame.header.tag != expected_tag ||
        frame.header.src_rank != static_cast<std::uint32_t>(peer))
      throw ProtocolError("recv_frame: unexpected frame from rank " + std::to_string(peer));
    return std::move(frame.payload);
  }

  void barrier() override {
    std::unique_lock<std::mutex> lock(shared_->barrier_mutex);
    const std::uint64_t generation = shared_->barrier_generation;
    if (++shared_->barrier_count == shared_->world_size) {
      shared_->barrier_count = 0;
      ++shared_->barrier_generation;
      shared_->barrier_cv.notify_all();
    } else {
      shared_->barrier_cv.wait(lock,
                               [&] { return shared_->barrier_generation != generation; });
    }
  }

private:
  void check_peer(int peer) const {
    if (peer < 0 || peer >= shared_->world_size)
      throw ProtocolError("peer rank " + std::to_string(peer) + " out of range");
  }

  std::shared_ptr<InProcWorld::Shared> shared_;
  int rank_;
};

}  // namespace

InProcWorld::InProcWorld(int world_size) : shared_(std::make_shared<Shared>(world_size)) {
  if (world_size < 1) throw TransportError("world size must be at least 1");
}

InProcWorld::~InProcWorld() = default;

int InProcWorld::world_size() const { return shared_->world_size; }

std::unique_ptr<Transport> InProcWorld::transport(int rank) {
  if (rank < 0 || rank >= shared_->world_size)
    throw TransportError("rank " + std::to_string(rank) + " out of range");
  return std::make_unique<InProcTransport>(shared_, rank);
}

}  // namespace fmoe
