#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "fmoe/errors.hpp"
#include "fmoe/transport.hpp"

namespace fmoe {

namespace {

std::string endpoint_str(const HostPort& hp) {
  return hp.host + ":" + std::to_string(hp.port);
}

class Socket {
public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
  Socket& operator=(Socket&& other) noexcept {
    if (this != &other) {
      close_fd();
      fd_ = other.fd_;
      other.fd_ = -1;
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close_fd(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }

  void send_all(const std::byte* data, std::size_t len) {
    std::size_t sent = 0;
    while (sent < len) {
      const ssize_t n = ::send(fd_, data + sent, len - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("send failed: ") + std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  void recv_all(std::byte* data, std::size_t len) {
    std::size_t got = 0;
    while (got < len) {
      const ssize_t n = ::recv(fd_, data + got, len - got, 0);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("recv failed: ") + std::strerror(errno));
      }
      if (n == 0) throw TransportError("peer closed connection mid-frame");
      got += static_cast<std::size_t>(n);
    }
  }

private:
  void close_fd() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  int fd_ = -1;
};

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

sockaddr_in resolve(const HostPort& hp) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(hp.port);
  if (inet_pton(AF_INET, hp.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* result = nullptr;
  if (getaddrinfo(hp.host.c_str(), nullptr, &hints, &result) != 0 || result == nullptr)
    throw TransportError("cannot resolve host " + hp.host);
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(result->ai_addr)->sin_addr;
  freeaddrinfo(result);
  return addr;
}

// Per-peer framed connection; one logical exchange uses a connection at a
// time, but sends and receives may run on different threads, hence the two
// direction locks.
struct PeerLink {
  Socket socket;
  std::mutex send_mutex;
  std::mutex recv_mutex;
};

class TcpTransport final : public Transport {
public:
  TcpTransport(int rank, const std::vector<HostPort>& endpoints,
               std::chrono::milliseconds timeout)
      : rank_(rank), world_(static_cast<int>(endpoints.size())), links_(endpoints.size()) {
    if (world_ < 1) throw TransportError("empty endpoint list");
    if (rank_ < 0 || rank_ >= world_)
      throw TransportError("rank " + std::to_string(rank_) + " outside world of " +
                           std::to_string(world_));
    if (world_ == 1) return;
    Socket listener = open_listener(endpoints[static_cast<std::size_t>(rank_)]);
    // Deterministic rendezvous: connect upward, accept from below.
    std::thread acceptor([&] { accept_lower(listener); });
    try {
      connect_upper(endpoints, timeout);
    } catch (...) {
      // unblock the acceptor before rethrowing
      shutdown_listener(listener);
      acceptor.join();
      throw;
    }
    acceptor.join();
    if (accept_error_) std::rethrow_exception(accept_error_);
  }

  int rank() const override { return rank_; }
  int world_size() const override { return world_; }

  void send_frame(int peer, MsgType type, std::uint32_t tag,
                  std::span<const std::byte> payload) override {
    PeerLink& link = this->link(peer);
    FrameHeader header{type, static_cast<std::uint32_t>(rank_), tag, payload.size()};
    std::array<std::byte, kFrameHeaderSize> head;
    encode_header(header, head);
    std::lock_guard<std::mutex> lock(link.send_mutex);
    link.socket.send_all(head.data(), head.size());
    if (!payload.empty()) link.socket.send_all(payload.data(), payload.size());
  }

  std::vector<std::byte> recv_frame(int peer, MsgType expected_type,
                                    std::uint32_t expected_tag) override {
    PeerLink& link = this->link(peer);
    std::lock_guard<std::mutex> lock(link.recv_mutex);
    std::array<std::byte, kFrameHeaderSize> head;
    link.socket.recv_all(head.data(), head.size());
    const FrameHeader header = decode_header(head);
    std::vector<std::byte> payload(header.payload_len);
    if (header.payload_len > 0) link.socket.recv_all(payload.data(), payload.size());
    if (header.type != expected_type || header.tag != expected_tag ||
        header.src_rank != static_cast<std::uint32_t>(peer))
      throw ProtocolError("recv_frame: unexpected frame from rank " + std::to_string(peer) +
                          " (type " + std::to_string(static_cast<int>(header.type)) +
                          ", tag " + std::to_string(header.tag) + ")");
    return payload;
  }

  // Gather-to-0 then broadcast, with empty Barrier frames.
  void barrier() override {
    if (world_ == 1) return;
    const std::uint32_t tag = next_tag();
    if (rank_ == 0) {
      for (int r = 1; r < world_; ++r) recv_frame(r, MsgType::Barrier, tag);
      for (int r = 1; r < world_; ++r) send_frame(r, MsgType::Barrier, tag, {});
    } else {
      send_frame(0, MsgType::Barrier, tag, {});
      recv_frame(0, MsgType::Barrier, tag);
    }
  }

private:
  PeerLink& link(int peer) {
    if (peer < 0 || peer >= world_ || peer == rank_)
      throw ProtocolError("invalid peer rank " + std::to_string(peer));
    PeerLink& l = links_[static_cast<std::size_t>(peer)];
    if (!l.socket.valid()) throw TransportError("no connection to rank " + std::to_string(peer));
    return l;
  }

  Socket open_listener(const HostPort& self) {
    Socket listener(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listener.valid()) throw TransportError("cannot create listener socket");
    int one = 1;
    ::setsockopt(listener.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(self.port);
    if (::bind(listener.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw TransportError("cannot bind " + endpoint_str(self) + ": " + std::strerror(errno));
    if (::listen(listener.fd(), world_) != 0)
      throw TransportError("listen failed on " + endpoint_str(self));
    return listener;
  }

  void accept_lower(Socket& listener) {
    try {
      for (int i = 0; i < rank_; ++i) {
        Socket conn(::accept(listener.fd(), nullptr, nullptr));
        if (!conn.valid())
          throw TransportError(std::string("accept failed: ") + std::strerror(errno));
        set_nodelay(conn.fd());
        // hello frame identifies the connecting rank
        std::array<std::byte, kFrameHeaderSize> head;
        conn.recv_all(head.data(), head.size());
        const FrameHeader hello = decode_header(head);
        if (hello.type != MsgType::Barrier || hello.payload_len != 0)
          throw ProtocolError("bad rendezvous hello");
        const int peer = static_cast<int>(hello.src_rank);
        if (peer < 0 || peer >= rank_ || links_[static_cast<std::size_t>(peer)].socket.valid())
          throw ProtocolError("rendezvous hello from unexpected rank " + std::to_string(peer));
        links_[static_cast<std::size_t>(peer)].socket = std::move(conn);
      }
    } catch (...) {
      accept_error_ = std::current_exception();
    }
  }

  void connect_upper(const std::vector<HostPort>& endpoints,
                     std::chrono::milliseconds timeout) {
    using clock = std::chrono::steady_clock;
    for (int peer = rank_ + 1; peer < world_; ++peer) {
      const HostPort& hp = endpoints[static_cast<std::size_t>(peer)];
      const sockaddr_in addr = resolve(hp);
      const auto deadline = clock::now() + timeout;
      Socket conn;
      for (;;) {
        Socket attempt(::socket(AF_INET, SOCK_STREAM, 0));
        if (attempt.valid() &&
            ::connect(attempt.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
          conn = std::move(attempt);
          break;
        }
        if (clock::now() >= deadline)
          throw TransportError("rendezvous with rank " + std::to_string(peer) + " at " +
                               endpoint_str(hp) + " failed: " + std::strerror(errno));
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
      }
      set_nodelay(conn.fd());
      FrameHeader hello{MsgType::Barrier, static_cast<std::uint32_t>(rank_), 0, 0};
      std::array<std::byte, kFrameHeaderSize> head;
      encode_header(hello, head);
      conn.send_all(head.data(), head.size());
      links_[static_cast<std::size_t>(peer)].socket = std::move(conn);
    }
  }

  void shutdown_listener(Socket& listener) {
    ::shutdown(listener.fd(), SHUT_RDWR);
  }

  int rank_;
  int world_;
  std::vector<PeerLink> links_;  // index = peer rank; self entry unused
  std::exception_ptr accept_error_;
};

}  // namespace

std::vector<HostPort> parse_hostfile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TransportError("cannot open hostfile " + path);
  std::vector<HostPort> endpoints;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto colon = line.rfind(':');
    if (colon == std::string::npos)
      throw TransportError("hostfile line missing port: " + line);
    HostPort hp;
    hp.host = line.substr(0, colon);
    hp.port = static_cast<std::uint16_t>(std::stoi(line.substr(colon + 1)));
    endpoints.push_back(std::move(hp));
  }
  return endpoints;
}

std::vector<HostPort> localhost_endpoints(int world_size, std::uint16_t base_port) {
  std::vector<HostPort> endpoints;
  endpoints.reserve(static_cast<std::size_t>(world_size));
  for (int r = 0; r < world_size; ++r)
    endpoints.push_back({"127.0.0.1", static_cast<std::uint16_t>(base_port + r)});
  return endpoints;
}

std::unique_ptr<Transport> tcp_connect(int rank, const std::vector<HostPort>& endpoints,
                                       std::chrono::milliseconds timeout) {
  return std::make_unique<TcpTransport>(rank, endpoints, timeout);
}

}  // namespace fmoe
