#pragma once

// Wire format: [payload length: u32 big-endian][payload: one UTF-8 JSON object].
// Decoding is validation-first; nothing is acted on until the whole frame has
// been framed, parsed and matched against its message schema.

#include "usp/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <deque>
#include <set>

namespace usp {

inline constexpr std::size_t kMaxFrameBytes = 65536;
inline constexpr std::size_t kFrameHeaderBytes = 4;
inline constexpr std::size_t kMaxNameBytes = 255;
// Upper bound on "streams" entries; keeps a full token response inside one frame.
inline constexpr std::size_t kMaxStreams = 64;

struct StreamRequest {
  std::string application;
  std::optional<std::string> token;

  bool operator==(const StreamRequest&) const = default;
};

struct Initialize {
  std::vector<std::string> authentication;
  std::vector<StreamRequest> streams;

  bool operator==(const Initialize&) const = default;
};

struct Connect {
  std::string application;
  bool operator==(const Connect&) const = default;
};

struct Authenticate {
  std::string protocol;
  bool operator==(const Authenticate&) const = default;
};

struct Token {
  std::vector<StreamRequest> streams;
  bool operator==(const Token&) const = default;
};

struct Error {
  std::string error;
  bool operator==(const Error&) const = default;
};

// Opaque authenticator bytes, carried as base64 text.
struct AuthData {
  std::string payload;
  bool operator==(const AuthData&) const = default;

  static AuthData from_bytes(ByteView b) { return {base64_encode(b)}; }
  [[nodiscard]] Bytes bytes() const { return base64_decode(payload).value_or(Bytes{}); }
};

using Message = std::variant<Initialize, Connect, Authenticate, Token, Error, AuthData>;

inline std::string_view message_name(const Message& m) noexcept {
  static constexpr std::string_view names[] = {"initialize", "connect", "authenticate",
                                               "token",      "error",   "authdata"};
  return names[m.index()];
}

enum class MalformedKind { truncated, oversize, not_json, unknown_message_type, schema_violation };

inline std::string_view to_string(MalformedKind k) noexcept {
  switch (k) {
    case MalformedKind::truncated: return "truncated";
    case MalformedKind::oversize: return "oversize";
    case MalformedKind::not_json: return "not_json";
    case MalformedKind::unknown_message_type: return "unknown_message_type";
    case MalformedKind::schema_violation: return "schema_violation";
  }
  return "unknown";
}

struct WireError {
  MalformedKind kind;
  std::string detail;  // field path for schema violations

  bool operator==(const WireError&) const = default;
};

class OversizeMessage : public std::length_error {
 public:
  using std::length_error::length_error;
};

namespace detail {

inline bool valid_name(std::string_view s) noexcept {
  if (s.empty() || s.size() > kMaxNameBytes) return false;
  return std::none_of(s.begin(), s.end(), [](char c) {
    auto u = static_cast<unsigned char>(c);
    return u < 0x20 || u == 0x7F;
  });
}

inline bool valid_token_text(std::string_view s) noexcept {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    auto u = static_cast<unsigned char>(c);
    return u >= 0x20 && u <= 0x7E;
  });
}

inline Failure<WireError> schema(std::string path) {
  return Failure{WireError{MalformedKind::schema_violation, std::move(path)}};
}

using Json = nlohmann::json;

inline std::optional<WireError> exact_keys(const Json& obj, std::initializer_list<std::string_view> required,
                                           std::initializer_list<std::string_view> optional,
                                           const std::string& path) {
  for (auto key : required) {
    if (!obj.contains(std::string(key))) return WireError{MalformedKind::schema_violation, path + std::string(key)};
  }
  for (const auto& [key, _] : obj.items()) {
    bool known = std::find(required.begin(), required.end(), key) != required.end() ||
                 std::find(optional.begin(), optional.end(), key) != optional.end();
    if (!known) return WireError{MalformedKind::schema_violation, path + key};
  }
  return std::nullopt;
}

inline Result<std::string, WireError> name_field(const Json& obj, std::string_view key,
                                                 const std::string& path) {
  const auto& v = obj.at(std::string(key));
  if (!v.is_string() || !valid_name(v.get_ref<const std::string&>()))
    return schema(path + std::string(key));
  return v.get<std::string>();
}

inline Result<std::vector<StreamRequest>, WireError> streams_field(const Json& obj,
                                                                   bool token_required) {
  const auto& arr = obj.at("streams");
  if (!arr.is_array() || arr.empty() || arr.size() > kMaxStreams) return schema("streams");
  std::vector<StreamRequest> out;
  out.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& entry = arr[i];
    std::string path = "streams[" + std::to_string(i) + "].";
    if (!entry.is_object()) return schema(path.substr(0, path.size() - 1));
    if (auto e = exact_keys(entry, {"application"}, {"token"}, path)) return Failure{*e};
    auto app = name_field(entry, "application", path);
    if (!app) return Failure{app.error()};
    StreamRequest req{app.value(), std::nullopt};
    if (entry.contains("token")) {
      const auto& t = entry.at("token");
      if (!t.is_string()) return schema(path + "token");
      const auto& text = t.get_ref<const std::string&>();
      // An empty token is the same as no token.
      if (!text.empty()) {
        if (!valid_token_text(text)) return schema(path + "token");
        req.token = text;
      }
    }
    if (token_required && !req.token) return schema(path + "token");
    out.push_back(std::move(req));
  }
  return out;
}

}  // namespace detail

/// Checks a parsed JSON value against the six message shapes. Unknown
/// top-level fields and unknown "message" values are rejected.
inline Result<Message, WireError> validate_structure(const nlohmann::json& json) {
  using detail::schema;
  if (!json.is_object()) return schema("$");
  if (!json.contains("message")) return schema("message");
  const auto& tag = json.at("message");
  if (!tag.is_string()) return schema("message");
  const auto& name = tag.get_ref<const std::string&>();

  if (name == "initialize") {
    if (auto e = detail::exact_keys(json, {"message", "authentication", "streams"}, {}, ""))
      return Failure{*e};
    const auto& protos = json.at("authentication");
    if (!protos.is_array()) return schema("authentication");
    Initialize msg;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < protos.size(); ++i) {
      const auto& p = protos[i];
      std::string path = "authentication[" + std::to_string(i) + "]";
      if (!p.is_string() || !detail::valid_name(p.get_ref<const std::string&>())) return schema(path);
      if (!seen.insert(p.get<std::string>()).second) return schema(path);
      msg.authentication.push_back(p.get<std::string>());
    }
    auto streams = detail::streams_field(json, false);
    if (!streams) return Failure{streams.error()};
    msg.streams = std::move(streams).value();
    bool all_tokens = std::all_of(msg.streams.begin(), msg.streams.end(),
                                  [](const StreamRequest& s) { return s.token.has_value(); });
    if (msg.authentication.empty() && !all_tokens) return schema("authentication");
    return Message{std::move(msg)};
  }
  if (name == "connect") {
    if (auto e = detail::exact_keys(json, {"message", "application"}, {}, "")) return Failure{*e};
    auto app = detail::name_field(json, "application", "");
    if (!app) return Failure{app.error()};
    return Message{Connect{app.value()}};
  }
  if (name == "authenticate") {
    if (auto e = detail::exact_keys(json, {"message", "protocol"}, {}, "")) return Failure{*e};
    auto proto = detail::name_field(json, "protocol", "");
    if (!proto) return Failure{proto.error()};
    return Message{Authenticate{proto.value()}};
  }
  if (name == "token") {
    if (auto e = detail::exact_keys(json, {"message", "streams"}, {}, "")) return Failure{*e};
    auto streams = detail::streams_field(json, true);
    if (!streams) return Failure{streams.error()};
    return Message{Token{std::move(streams).value()}};
  }
  if (name == "error") {
    if (auto e = detail::exact_keys(json, {"message", "error"}, {}, "")) return Failure{*e};
    const auto& text = json.at("error");
    if (!text.is_string()) return schema("error");
    return Message{Error{text.get<std::string>()}};
  }
  if (name == "authdata") {
    if (auto e = detail::exact_keys(json, {"message", "payload"}, {}, "")) return Failure{*e};
    const auto& p = json.at("payload");
    if (!p.is_string() || !base64_decode(p.get_ref<const std::string&>())) return schema("payload");
    return Message{AuthData{p.get<std::string>()}};
  }
  return Failure{WireError{MalformedKind::unknown_message_type, name}};
}

/// Parses and validates one payload (the bytes after the length prefix).
inline Result<Message, WireError> decode_payload(ByteView payload) {
  if (payload.size() > kMaxFrameBytes) return Failure{WireError{MalformedKind::oversize, "payload"}};
  auto json = nlohmann::json::parse(payload.begin(), payload.end(), nullptr, false);
  if (json.is_discarded()) return Failure{WireError{MalformedKind::not_json, "payload"}};
  return validate_structure(json);
}

/// Canonical JSON text: keys in schema order, "message" first.
inline std::string to_json_text(const Message& msg) {
  using OJson = nlohmann::ordered_json;
  auto streams_json = [](const std::vector<StreamRequest>& streams) {
    OJson arr = OJson::array();
    for (const auto& s : streams) {
      OJson e;
      e["application"] = s.application;
      if (s.token) e["token"] = *s.token;
      arr.push_back(std::move(e));
    }
    return arr;
  };
  OJson j;
  j["message"] = std::string(message_name(msg));
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, Initialize>) {
          j["authentication"] = m.authentication;
          j["streams"] = streams_json(m.streams);
        } else if constexpr (std::is_same_v<T, Connect>) {
          j["application"] = m.application;
        } else if constexpr (std::is_same_v<T, Authenticate>) {
          j["protocol"] = m.protocol;
        } else if constexpr (std::is_same_v<T, Token>) {
          j["streams"] = streams_json(m.streams);
        } else if constexpr (std::is_same_v<T, Error>) {
          j["error"] = m.error;
        } else {
          j["payload"] = m.payload;
        }
      },
      msg);
  // Replace rather than throw on invalid UTF-8 in error text.
  return j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

inline void put_u32(Bytes& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32(ByteView in) noexcept {
  return (std::uint32_t{in[0]} << 24) | (std::uint32_t{in[1]} << 16) | (std::uint32_t{in[2]} << 8) |
         std::uint32_t{in[3]};
}

/// Frames a message. Throws std::invalid_argument when the message is not a
/// valid instance of its schema and OversizeMessage past kMaxFrameBytes.
inline Bytes encode_frame(const Message& msg) {
  std::string text = to_json_text(msg);
  auto check = decode_payload(as_bytes(text));
  if (!check) {
    if (check.error().kind == MalformedKind::oversize)
      throw OversizeMessage("message payload exceeds " + std::to_string(kMaxFrameBytes) + " bytes");
    throw std::invalid_argument("invalid " + std::string(message_name(msg)) +
                                " message: " + check.error().detail);
  }
  Bytes out;
  out.reserve(kFrameHeaderBytes + text.size());
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

/// Raw frame with an arbitrary payload. Test and fuzz helper; performs no
/// validation.
inline Bytes raw_frame(ByteView payload) {
  Bytes out;
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

/// Decodes exactly one frame. Accepts arbitrary input.
inline Result<Message, WireError> decode_frame(ByteView bytes) {
  if (bytes.size() < kFrameHeaderBytes)
    return Failure{WireError{MalformedKind::truncated, "length prefix"}};
  std::uint32_t len = get_u32(bytes);
  if (len > kMaxFrameBytes) return Failure{WireError{MalformedKind::oversize, "length prefix"}};
  auto body = bytes.subspan(kFrameHeaderBytes);
  if (body.size() < len) return Failure{WireError{MalformedKind::truncated, "payload"}};
  if (body.size() > len) return detail::schema("trailing bytes");
  return decode_payload(body);
}

/// Incremental frame splitter for byte streams. Chunk boundaries have no
/// effect on the sequence of results. An oversize prefix is terminal.
class FrameReader {
 public:
  void feed(ByteView chunk) { buffer_.insert(buffer_.end(), chunk.begin(), chunk.end()); }

  /// Next complete frame, or nullopt when more bytes are needed.
  std::optional<Result<Message, WireError>> next() {
    if (poisoned_) return std::nullopt;
    if (buffer_.size() < kFrameHeaderBytes) return std::nullopt;
    std::uint8_t head[kFrameHeaderBytes];
    std::copy_n(buffer_.begin(), kFrameHeaderBytes, head);
    std::uint32_t len = get_u32(head);
    if (len > kMaxFrameBytes) {
      poisoned_ = true;
      return Result<Message, WireError>{Failure{WireError{MalformedKind::oversize, "length prefix"}}};
    }
    if (buffer_.size() < kFrameHeaderBytes + len) return std::nullopt;
    Bytes payload(buffer_.begin() + kFrameHeaderBytes, buffer_.begin() + kFrameHeaderBytes + len);
    buffer_.erase(buffer_.begin(), buffer_.begin() + kFrameHeaderBytes + len);
    return decode_payload(payload);
  }

  [[nodiscard]] std::size_t buffered() const noexcept { return buffer_.size(); }
  [[nodiscard]] bool poisoned() const noexcept { return poisoned_; }
  /// True when bytes of an incomplete frame are pending.
  [[nodiscard]] bool mid_frame() const noexcept { return !buffer_.empty(); }

  /// Hands over unconsumed bytes and empties the reader.
  Bytes take_buffered() {
    Bytes out(buffer_.begin(), buffer_.end());
    buffer_.clear();
    return out;
  }

 private:
  std::deque<std::uint8_t> buffer_;
  bool poisoned_ = false;
};

}  // namespace usp
