#pragma once

#include "usp/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace usp {

inline constexpr std::uint16_t kDefaultPort = 4450;

namespace detail {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { reset(); }

  [[nodiscard]] int get() const noexcept { return fd_; }
  void reset() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline std::string errno_text(int err) { return std::strerror(err); }

inline std::string endpoint_label(const sockaddr* sa) {
  char host[NI_MAXHOST] = {};
  char serv[NI_MAXSERV] = {};
  socklen_t len = sa->sa_family == AF_INET6 ? sizeof(sockaddr_in6) : sizeof(sockaddr_in);
  if (::getnameinfo(sa, len, host, sizeof host, serv, sizeof serv, NI_NUMERICHOST | NI_NUMERICSERV) != 0)
    return "tcp:?";
  std::string h = host;
  if (sa->sa_family == AF_INET6) h = "[" + h + "]";
  return h + ":" + serv;
}

struct AddrInfo {
  addrinfo* head = nullptr;
  ~AddrInfo() {
    if (head) ::freeaddrinfo(head);
  }
};

inline void resolve(AddrInfo& out, const std::string& host, std::uint16_t port, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  std::string service = std::to_string(port);
  int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), service.c_str(), &hints, &out.head);
  if (rc != 0) throw TransportError(TransportErrorKind::resolve, host + ": " + ::gai_strerror(rc));
}

}  // namespace detail

class TcpStream final : public StreamHandle {
 public:
  TcpStream(detail::Fd fd, std::string label) : fd_(std::move(fd)), label_(std::move(label)) {
    int one = 1;
    ::setsockopt(fd_.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpStream() override { close(); }

  std::optional<Bytes> read_for(std::size_t max_bytes, Millis timeout) override {
    if (closed_) return Bytes{};
    pollfd p{fd_.get(), POLLIN, 0};
    int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc == 0) return std::nullopt;
    if (rc < 0) {
      if (errno == EINTR) return std::nullopt;
      throw TransportError(TransportErrorKind::io, detail::errno_text(errno));
    }
    Bytes buf(max_bytes);
    ssize_t n = ::recv(fd_.get(), buf.data(), buf.size(), 0);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) return std::nullopt;
      if (errno == ECONNRESET) return Bytes{};
      throw TransportError(TransportErrorKind::io, detail::errno_text(errno));
    }
    buf.resize(static_cast<std::size_t>(n));
    return buf;
  }

  void write(ByteView bytes) override {
    if (closed_) throw TransportError(TransportErrorKind::connection_lost, label_ + " is closed");
    std::size_t off = 0;
    while (off < bytes.size()) {
      ssize_t n = ::send(fd_.get(), bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(TransportErrorKind::connection_lost, label_ + ": " + detail::errno_text(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  void close() override {
    if (closed_.exchange(true)) return;
    ::shutdown(fd_.get(), SHUT_RDWR);
  }

  [[nodiscard]] std::string peer_label() const override { return label_; }

 private:
  detail::Fd fd_;
  std::string label_;
  std::atomic<bool> closed_{false};
};

class TcpListener final : public Listener {
 public:
  /// Binds host:port; port 0 picks a free port.
  TcpListener(const std::string& host, std::uint16_t port) {
    detail::AddrInfo ai;
    detail::resolve(ai, host, port, true);
    int last_err = 0;
    for (auto* a = ai.head; a; a = a->ai_next) {
      detail::Fd fd(::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol));
      if (fd.get() < 0) {
        last_err = errno;
        continue;
      }
      int one = 1;
      ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      if (::bind(fd.get(), a->ai_addr, a->ai_addrlen) != 0 || ::listen(fd.get(), 128) != 0) {
        last_err = errno;
        continue;
      }
      fd_ = std::move(fd);
      break;
    }
    if (fd_.get() < 0)
      throw TransportError(TransportErrorKind::bind, host + ":" + std::to_string(port) + ": " +
                                                         detail::errno_text(last_err));
    sockaddr_storage ss{};
    socklen_t len = sizeof ss;
    ::getsockname(fd_.get(), reinterpret_cast<sockaddr*>(&ss), &len);
    port_ = ntohs(ss.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port
                                           : reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
  }

  [[nodiscard]] std::uint16_t port() const noexcept { return port_; }

  std::unique_ptr<StreamHandle> accept_for(Millis timeout) override {
    if (closed_) return nullptr;
    pollfd p{fd_.get(), POLLIN, 0};
    int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc <= 0 || closed_) return nullptr;
    sockaddr_storage ss{};
    socklen_t len = sizeof ss;
    int c = ::accept4(fd_.get(), reinterpret_cast<sockaddr*>(&ss), &len, SOCK_CLOEXEC);
    if (c < 0) return nullptr;
    return std::make_unique<TcpStream>(detail::Fd(c), detail::endpoint_label(reinterpret_cast<sockaddr*>(&ss)));
  }

  void close() override { closed_ = true; }

 private:
  detail::Fd fd_;
  std::uint16_t port_ = 0;
  std::atomic<bool> closed_{false};
};

/// Parses "host:port", "[v6]:port" or "host" (default port).
inline std::pair<std::string, std::uint16_t> parse_host_port(std::string_view addr,
                                                             std::uint16_t default_port = kDefaultPort) {
  std::string host;
  std::string_view port_text;
  if (!addr.empty() && addr.front() == '[') {
    auto close = addr.find(']');
    if (close == std::string_view::npos) throw std::invalid_argument("bad address " + std::string(addr));
    host = std::string(addr.substr(1, close - 1));
    auto rest = addr.substr(close + 1);
    if (!rest.empty()) {
      if (rest.front() != ':') throw std::invalid_argument("bad address " + std::string(addr));
      port_text = rest.substr(1);
    }
  } else {
    auto colon = addr.rfind(':');
    if (colon == std::string_view::npos) {
      host = std::string(addr);
    } else {
      host = std::string(addr.substr(0, colon));
      port_text = addr.substr(colon + 1);
    }
  }
  if (host.empty()) throw std::invalid_argument("bad address " + std::string(addr));
  std::uint16_t port = default_port;
  if (!port_text.empty() || addr.back() == ':') {
    if (port_text.empty() || port_text.size() > 5 ||
        port_text.find_first_not_of("0123456789") != std::string_view::npos)
      throw std::invalid_argument("bad port in " + std::string(addr));
    unsigned long v = std::stoul(std::string(port_text));
    if (v > 65535) throw std::invalid_argument("bad port in " + std::string(addr));
    port = static_cast<std::uint16_t>(v);
  }
  return {host, port};
}

inline std::unique_ptr<TcpListener> tcp_listen(std::string_view bind_address) {
  auto [host, port] = parse_host_port(bind_address);
  return std::make_unique<TcpListener>(host, port);
}

inline std::unique_ptr<StreamHandle> tcp_dial(const std::string& host, std::uint16_t port,
                                              Millis timeout = Millis(5000)) {
  detail::AddrInfo ai;
  detail::resolve(ai, host, port, false);
  TransportErrorKind kind = TransportErrorKind::connect_refused;
  std::string why = "no addresses";
  for (auto* a = ai.head; a; a = a->ai_next) {
    detail::Fd fd(::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC | SOCK_NONBLOCK, a->ai_protocol));
    if (fd.get() < 0) continue;
    int rc = ::connect(fd.get(), a->ai_addr, a->ai_addrlen);
    if (rc != 0 && errno != EINPROGRESS) {
      kind = TransportErrorKind::connect_refused;
      why = detail::errno_text(errno);
      continue;
    }
    if (rc != 0) {
      pollfd p{fd.get(), POLLOUT, 0};
      int prc = ::poll(&p, 1, static_cast<int>(timeout.count()));
      if (prc == 0) {
        kind = TransportErrorKind::timeout;
        why = "no answer within " + std::to_string(timeout.count()) + " ms";
        continue;
      }
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
      if (prc < 0 || err != 0) {
        kind = err == ETIMEDOUT ? TransportErrorKind::timeout : TransportErrorKind::connect_refused;
        why = detail::errno_text(prc < 0 ? errno : err);
        continue;
      }
    }
    int flags = ::fcntl(fd.get(), F_GETFL);
    ::fcntl(fd.get(), F_SETFL, flags & ~O_NONBLOCK);
    return std::make_unique<TcpStream>(std::move(fd), detail::endpoint_label(a->ai_addr));
  }
  throw TransportError(kind, host + ":" + std::to_string(port) + ": " + why);
}

}  // namespace usp
