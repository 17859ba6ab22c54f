// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <string>
#include <utility>

#include "cmt/serving/wire.hpp"

namespace cmt::net {

using Clock = std::chrono::steady_clock;

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }
  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

/// "host:port" or ":port" / "port" (host defaults to 127.0.0.1).
inline Endpoint parse_endpoint(const std::string& s) {
  Endpoint e;
  const auto colon = s.rfind(':');
  std::string port = colon == std::string::npos ? s : s.substr(colon + 1);
  if (colon != std::string::npos && colon > 0) e.host = s.substr(0, colon);
  try {
    std::size_t used = 0;
    const unsigned long p = std::stoul(port, &used);
    if (used != port.size() || p > 65535) throw std::invalid_argument("port");
    e.port = static_cast<std::uint16_t>(p);
  } catch (const std::exception&) {
    throw ConfigError("bad address '" + s + "' (expected host:port)");
  }
  return e;
}

inline std::string errno_str() { return std::strerror(errno); }

/// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  /// Wakes any thread blocked on this socket without releasing the fd.
  void shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  int fd_ = -1;
};

inline sockaddr_in to_sockaddr(const Endpoint& e) {
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(e.port);
  if (::inet_pton(AF_INET, e.host == "localhost" ? "127.0.0.1" : e.host.c_str(), &a.sin_addr) != 1)
    throw ConfigError("unsupported host '" + e.host + "' (IPv4 literal expected)");
  return a;
}

class Listener {
 public:
  explicit Listener(const Endpoint& at) {
    sock_ = Socket(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!sock_.valid()) throw ServiceError("socket: " + errno_str());
    int one = 1;
    ::setsockopt(sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in a = to_sockaddr(at);
    if (::bind(sock_.fd(), reinterpret_cast<sockaddr*>(&a), sizeof a) != 0)
      throw ServiceError("cannot bind " + at.str() + ": " + errno_str());
    if (::listen(sock_.fd(), 128) != 0) throw ServiceError("listen: " + errno_str());
    socklen_t len = sizeof a;
    ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&a), &len);
    endpoint_ = {at.host, ntohs(a.sin_port)};
  }

  const Endpoint& endpoint() const noexcept { return endpoint_; }

  /// Waits up to `timeout` for a connection; invalid socket on timeout.
  Socket accept(std::chrono::milliseconds timeout) {
    pollfd p{sock_.fd(), POLLIN, 0};
    const int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (r <= 0) return {};
    Socket s(::accept4(sock_.fd(), nullptr, nullptr, SOCK_CLOEXEC));
    if (s.valid()) {
      int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    }
    return s;
  }

  void close() { sock_.close(); }

 private:
  Socket sock_;
  Endpoint endpoint_;
};

inline int remaining_ms(Clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
  return left <= 0 ? 0 : static_cast<int>(left);
}

inline Socket connect_to(const Endpoint& e, std::chrono::milliseconds timeout) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC | SOCK_NONBLOCK, 0));
  if (!s.valid()) throw ServiceError("socket: " + errno_str());
  sockaddr_in a = to_sockaddr(e);
  if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&a), sizeof a) != 0) {
    if (errno != EINPROGRESS) throw ServiceError("cannot connect to " + e.str() + ": " + errno_str());
    pollfd p{s.fd(), POLLOUT, 0};
    if (::poll(&p, 1, static_cast<int>(timeout.count())) <= 0)
      throw ServiceError("connect to " + e.str() + " timed out");
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) throw ServiceError("cannot connect to " + e.str() + ": " + std::strerror(err));
  }
  ::fcntl(s.fd(), F_SETFL, ::fcntl(s.fd(), F_GETFL) & ~O_NONBLOCK);
  int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

/// Framed message stream over one socket. Not thread-safe: one reader and
/// one writer at a time.
class Connection {
 public:
  Connection() = default;
  explicit Connection(Socket s, std::uint32_t max_payload = wire::kDefaultMaxPayload)
      : sock_(std::move(s)), decoder_(max_payload) {}

  bool open() const noexcept { return sock_.valid() && !closed_; }
  Socket& socket() noexcept { return sock_; }

  void send(const wire::Message& m) {
    const Bytes b = wire::encode_message(m);
    std::size_t off = 0;
    while (off < b.size()) {
      const ssize_t n = ::send(sock_.fd(), b.data() + off, b.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        closed_ = true;
        throw ServiceError("send failed: " + errno_str());
      }
      off += static_cast<std::size_t>(n);
    }
  }

  /// Next frame before `deadline`. nullopt on timeout; throws ServiceError when
  /// the peer closes and WireError on a malformed stream.
  std::optional<wire::Message> receive(Clock::time_point deadline) {
    for (;;) {
      if (auto m = decoder_.next()) return m;
      pollfd p{sock_.fd(), POLLIN, 0};
      const int r = ::poll(&p, 1, remaining_ms(deadline));
      if (r < 0 && errno == EINTR) continue;
      if (r == 0) return std::nullopt;
      std::uint8_t buf[64 * 1024];
      const ssize_t n = ::recv(sock_.fd(), buf, sizeof buf, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        closed_ = true;
        if (decoder_.buffered() != 0) decoder_.finish();
        throw ServiceError("connection closed by peer");
      }
      decoder_.feed({buf, static_cast<std::size_t>(n)});
    }
  }

  /// Blocks until a frame arrives, the peer closes (nullopt) or `stop` polls true.
  template <class Stop>
  std::optional<wire::Message> receive_until(Stop&& stop) {
    for (;;) {
      if (stop()) return std::nullopt;
      try {
        if (auto m = receive(Clock::now() + std::chrono::milliseconds(100))) return m;
      } catch (const wire::WireError&) {
        throw;
      } catch (const ServiceError&) {
        return std::nullopt;
      }
    }
  }

 private:
  Socket sock_;
  wire::Decoder decoder_;
  bool closed_ = false;
};

/// One request/response exchange on a fresh or pooled connection.
inline wire::Message round_trip(Connection& c, const wire::Message& req, Clock::time_point deadline) {
  c.send(req);
  auto reply = c.receive(deadline);
  if (!reply) throw TimeoutError("", "no reply before deadline");
  if (reply->request_id != req.request_id && reply->type != wire::MsgType::error)
    throw ServiceError("reply carries request_id " + std::to_string(reply->request_id) + ", expected " +
                       std::to_string(req.request_id));
  return *reply;
}

}  // namespace cmt::net
