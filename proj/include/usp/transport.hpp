#pragma once

#include "usp/wire.hpp"

#include <condition_variable>
#include <deque>
#include <memory>
#include <thread>

namespace usp {

enum class TransportErrorKind { bind, connect_refused, timeout, resolve, connection_lost, io };

inline std::string_view to_string(TransportErrorKind k) noexcept {
  switch (k) {
    case TransportErrorKind::bind: return "bind";
    case TransportErrorKind::connect_refused: return "connect_refused";
    case TransportErrorKind::timeout: return "timeout";
    case TransportErrorKind::resolve: return "resolve";
    case TransportErrorKind::connection_lost: return "connection_lost";
    case TransportErrorKind::io: return "io";
  }
  return "unknown";
}

class TransportError : public std::runtime_error {
 public:
  TransportError(TransportErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  [[nodiscard]] TransportErrorKind kind() const noexcept { return kind_; }

 private:
  TransportErrorKind kind_;
};

using Millis = std::chrono::milliseconds;

/// Reliable, ordered byte stream. Closing tears down both directions.
class StreamHandle {
 public:
  virtual ~StreamHandle() = default;

  /// Up to max_bytes. nullopt on timeout; an empty vector means end of stream.
  virtual std::optional<Bytes> read_for(std::size_t max_bytes, Millis timeout) = 0;
  /// Throws TransportError(connection_lost) once either side has closed.
  virtual void write(ByteView bytes) = 0;
  virtual void close() = 0;
  [[nodiscard]] virtual std::string peer_label() const = 0;

  /// Blocks until data or end of stream.
  Bytes read(std::size_t max_bytes) {
    for (;;) {
      if (auto r = read_for(max_bytes, Millis(1000))) return std::move(*r);
    }
  }
};

class Listener {
 public:
  virtual ~Listener() = default;
  /// nullptr on timeout or after close().
  virtual std::unique_ptr<StreamHandle> accept_for(Millis timeout) = 0;
  virtual void close() = 0;
};

// ---------------------------------------------------------------------------
// In-memory duplex pair.

struct FaultPlan {
  /// Total bytes (both directions) the pair carries before the connection drops.
  std::optional<std::size_t> drop_connection_at_byte;
  /// Applied before every write.
  Millis write_delay{0};
};

namespace detail {

struct MemoryChannel {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::uint8_t> to[2];  // to[i]: bytes readable by end i
  bool closed = false;
  bool closed_by[2] = {false, false};
  std::size_t carried = 0;
  FaultPlan plan;
};

class MemoryEnd final : public StreamHandle {
 public:
  MemoryEnd(std::shared_ptr<MemoryChannel> ch, int side, std::string label)
      : ch_(std::move(ch)), side_(side), label_(std::move(label)) {}
  ~MemoryEnd() override { close(); }

  std::optional<Bytes> read_for(std::size_t max_bytes, Millis timeout) override {
    std::unique_lock lock(ch_->mu);
    auto& in = ch_->to[side_];
    if (ch_->closed_by[side_]) return Bytes{};
    if (!ch_->cv.wait_for(lock, timeout, [&] { return !in.empty() || ch_->closed; })) return std::nullopt;
    // Data written before the close is still delivered.
    std::size_t n = std::min(max_bytes, in.size());
    Bytes out(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(n));
    in.erase(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
  }

  void write(ByteView bytes) override {
    if (ch_->plan.write_delay.count() > 0) std::this_thread::sleep_for(ch_->plan.write_delay);
    std::lock_guard lock(ch_->mu);
    if (ch_->closed) throw TransportError(TransportErrorKind::connection_lost, label_ + " is closed");
    auto& out = ch_->to[1 - side_];
    std::size_t allowed = bytes.size();
    bool drop = false;
    if (auto limit = ch_->plan.drop_connection_at_byte) {
      std::size_t room = *limit > ch_->carried ? *limit - ch_->carried : 0;
      if (room < allowed) {
        allowed = room;
        drop = true;
      }
    }
    out.insert(out.end(), bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(allowed));
    ch_->carried += allowed;
    if (drop) ch_->closed = true;
    ch_->cv.notify_all();
    if (drop) throw TransportError(TransportErrorKind::connection_lost, "scripted drop after byte " +
                                                                            std::to_string(ch_->carried));
  }

  void close() override {
    std::lock_guard lock(ch_->mu);
    ch_->closed = true;
    ch_->closed_by[side_] = true;
    ch_->cv.notify_all();
  }

  [[nodiscard]] std::string peer_label() const override { return label_; }

 private:
  std::shared_ptr<MemoryChannel> ch_;
  int side_;
  std::string label_;
};

}  // namespace detail

inline std::pair<std::unique_ptr<StreamHandle>, std::unique_ptr<StreamHandle>> memory_pair(
    FaultPlan plan = {}, const std::string& label = "memory") {
  auto ch = std::make_shared<detail::MemoryChannel>();
  ch->plan = plan;
  return {std::make_unique<detail::MemoryEnd>(ch, 0, label + ":a"),
          std::make_unique<detail::MemoryEnd>(ch, 1, label + ":b")};
}

/// Listener whose connections are created by dial(); each dial yields the
/// client end and queues the server end for accept_for().
class MemoryListener final : public Listener {
 public:
  std::unique_ptr<StreamHandle> dial() {
    std::lock_guard lock(mu_);
    if (closed_) throw TransportError(TransportErrorKind::connect_refused, "memory listener closed");
    auto [client, server] = memory_pair({}, "memory#" + std::to_string(++count_));
    pending_.push_back(std::move(server));
    cv_.notify_all();
    return std::move(client);
  }

  std::unique_ptr<StreamHandle> accept_for(Millis timeout) override {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return !pending_.empty() || closed_; })) return nullptr;
    if (pending_.empty()) return nullptr;
    auto s = std::move(pending_.front());
    pending_.pop_front();
    return s;
  }

  void close() override {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::unique_ptr<StreamHandle>> pending_;
  std::size_t count_ = 0;
  bool closed_ = false;
};

/// Replays buffered bytes before reading from the wrapped stream.
class PrefixedStream final : public StreamHandle {
 public:
  PrefixedStream(std::unique_ptr<StreamHandle> inner, Bytes prefix)
      : inner_(std::move(inner)), prefix_(std::move(prefix)) {}

  std::optional<Bytes> read_for(std::size_t max_bytes, Millis timeout) override {
    if (!prefix_.empty()) {
      std::size_t n = std::min(max_bytes, prefix_.size());
      Bytes out(prefix_.begin(), prefix_.begin() + static_cast<std::ptrdiff_t>(n));
      prefix_.erase(prefix_.begin(), prefix_.begin() + static_cast<std::ptrdiff_t>(n));
      return out;
    }
    return inner_->read_for(max_bytes, timeout);
  }
  void write(ByteView bytes) override { inner_->write(bytes); }
  void close() override { inner_->close(); }
  [[nodiscard]] std::string peer_label() const override { return inner_->peer_label(); }

 private:
  std::unique_ptr<StreamHandle> inner_;
  Bytes prefix_;
};

// ---------------------------------------------------------------------------
// Frame I/O over a stream.

struct EndOfStream {
  bool operator==(const EndOfStream&) const = default;
};
struct ConnectionLost {
  bool operator==(const ConnectionLost&) const = default;
};
struct TimedOut {
  bool operator==(const TimedOut&) const = default;
};

using RecvResult = std::variant<Message, WireError, EndOfStream, ConnectionLost, TimedOut>;

inline constexpr std::size_t kReadChunkBytes = 4096;

class FrameIo {
 public:
  explicit FrameIo(StreamHandle& stream) : stream_(stream) {}

  void send(const Message& m) { stream_.write(encode_frame(m)); }

  /// One frame, however the bytes were chunked. A close in the middle of a
  /// frame is ConnectionLost; a close between frames is EndOfStream.
  RecvResult recv(Millis timeout = Millis(10'000)) {
    for (;;) {
      if (auto r = reader_.next()) {
        if (r->ok()) return r->value();
        return r->error();
      }
      if (reader_.poisoned()) return WireError{MalformedKind::oversize, "length prefix"};
      std::optional<Bytes> chunk;
      try {
        chunk = stream_.read_for(kReadChunkBytes, timeout);
      } catch (const TransportError&) {
        return ConnectionLost{};
      }
      if (!chunk) return TimedOut{};
      if (chunk->empty()) {
        if (reader_.mid_frame()) return ConnectionLost{};
        return EndOfStream{};
      }
      reader_.feed(*chunk);
    }
  }

  /// Releases bytes read past the last frame.
  Bytes detach() { return reader_.take_buffered(); }

 private:
  StreamHandle& stream_;
  FrameReader reader_;
};

}  // namespace usp
