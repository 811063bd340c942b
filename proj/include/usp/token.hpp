#pragma once

// Identity tokens: self-contained, HMAC-signed, application-bound bearer
// credentials. Record layout (all integers big-endian), then base64:
//
//   u8   version (0x01)
//   u16  identity length, identity bytes
//   u16  application length, application bytes
//   i64  issued_at
//   i64  expires_at
//   16   nonce
//   32   HMAC-SHA-256(secret, all preceding bytes)

#include "usp/common.hpp"
#include "usp/wire.hpp"

#include <unordered_map>

namespace usp {

inline constexpr std::uint8_t kTokenVersion = 1;
inline constexpr std::size_t kNonceBytes = 16;
inline constexpr std::int64_t kDefaultTokenTtl = 3600;
inline constexpr std::string_view kAnonymous = "anonymous";

using Nonce = std::array<std::uint8_t, kNonceBytes>;

struct IdentityToken {
  std::string identity;
  std::string application;
  std::int64_t issued_at = 0;
  std::int64_t expires_at = 0;
  Nonce nonce{};
  Mac signature{};

  [[nodiscard]] Bytes signed_record() const {
    Bytes out;
    out.push_back(kTokenVersion);
    auto put_str = [&](const std::string& s) {
      out.push_back(static_cast<std::uint8_t>(s.size() >> 8));
      out.push_back(static_cast<std::uint8_t>(s.size()));
      out.insert(out.end(), s.begin(), s.end());
    };
    auto put_i64 = [&](std::int64_t v) {
      auto u = static_cast<std::uint64_t>(v);
      for (int shift = 56; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(u >> shift));
    };
    put_str(identity);
    put_str(application);
    put_i64(issued_at);
    put_i64(expires_at);
    out.insert(out.end(), nonce.begin(), nonce.end());
    return out;
  }

  [[nodiscard]] std::string encoded() const {
    Bytes rec = signed_record();
    rec.insert(rec.end(), signature.begin(), signature.end());
    return base64_encode(rec);
  }

  bool operator==(const IdentityToken&) const = default;
};

enum class TokenError { malformed, bad_signature, expired, application_mismatch };

inline std::string_view to_string(TokenError e) noexcept {
  switch (e) {
    case TokenError::malformed: return "malformed";
    case TokenError::bad_signature: return "bad_signature";
    case TokenError::expired: return "expired";
    case TokenError::application_mismatch: return "application_mismatch";
  }
  return "unknown";
}

enum class AuthMethodKind { none_required, protocol, token };

struct AuthMethod {
  AuthMethodKind kind = AuthMethodKind::none_required;
  std::string protocol;  // set for AuthMethodKind::protocol

  [[nodiscard]] std::string label() const {
    switch (kind) {
      case AuthMethodKind::none_required: return "none_required";
      case AuthMethodKind::protocol: return "protocol(" + protocol + ")";
      case AuthMethodKind::token: return "token";
    }
    return "unknown";
  }
  bool operator==(const AuthMethod&) const = default;
};

/// The verified identity handed to an application alongside its stream.
struct IdentityContext {
  std::string identity;
  std::string application;
  AuthMethod method;
  std::int64_t authenticated_at = 0;

  static IdentityContext anonymous(std::string application, std::int64_t now) {
    return {std::string(kAnonymous), std::move(application), {}, now};
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"identity", identity},
            {"application", application},
            {"method", method.label()},
            {"authenticated_at", authenticated_at}};
  }

  bool operator==(const IdentityContext&) const = default;
};

/// Decodes the record layout without checking the signature.
inline std::optional<IdentityToken> parse_token(std::string_view text) {
  auto raw = base64_decode(text);
  if (!raw) return std::nullopt;
  ByteView in(*raw);
  IdentityToken t;
  std::size_t pos = 0;
  auto need = [&](std::size_t n) { return in.size() - pos >= n; };
  auto get_str = [&](std::string& out) {
    if (!need(2)) return false;
    std::size_t n = (std::size_t{in[pos]} << 8) | in[pos + 1];
    pos += 2;
    if (!need(n)) return false;
    out.assign(reinterpret_cast<const char*>(in.data() + pos), n);
    pos += n;
    return true;
  };
  auto get_i64 = [&](std::int64_t& out) {
    if (!need(8)) return false;
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u = (u << 8) | in[pos + i];
    pos += 8;
    out = static_cast<std::int64_t>(u);
    return true;
  };
  if (!need(1) || in[pos++] != kTokenVersion) return std::nullopt;
  if (!get_str(t.identity) || !get_str(t.application)) return std::nullopt;
  if (!get_i64(t.issued_at) || !get_i64(t.expires_at)) return std::nullopt;
  if (!need(kNonceBytes + kMacBytes)) return std::nullopt;
  std::copy_n(in.begin() + pos, kNonceBytes, t.nonce.begin());
  pos += kNonceBytes;
  std::copy_n(in.begin() + pos, kMacBytes, t.signature.begin());
  pos += kMacBytes;
  if (pos != in.size()) return std::nullopt;
  if (t.identity.empty() || !detail::valid_name(t.application)) return std::nullopt;
  return t;
}

inline IdentityToken issue_token(std::string identity, std::string application, std::int64_t ttl,
                                 const Clock& clock, ByteView secret, RandomSource& rng) {
  if (ttl <= 0) throw std::invalid_argument("token ttl must be positive");
  if (identity.empty() || identity.size() > 0xFFFF) throw std::invalid_argument("invalid token identity");
  if (!detail::valid_name(application)) throw std::invalid_argument("invalid token application");
  IdentityToken t;
  t.identity = std::move(identity);
  t.application = std::move(application);
  t.issued_at = clock.now();
  t.expires_at = t.issued_at + ttl;
  rng.fill(t.nonce);
  t.signature = hmac_sha256(secret, t.signed_record());
  return t;
}

/// Signature, validity window [issued_at, expires_at) and application binding.
inline Result<IdentityToken, TokenError> verify_token(std::string_view token, std::string_view application,
                                                      const Clock& clock, ByteView secret) {
  auto t = parse_token(token);
  if (!t) return Failure{TokenError::malformed};
  if (!constant_time_equal(hmac_sha256(secret, t->signed_record()), t->signature))
    return Failure{TokenError::bad_signature};
  std::int64_t now = clock.now();
  if (now < t->issued_at || now >= t->expires_at) return Failure{TokenError::expired};
  if (t->application != application) return Failure{TokenError::application_mismatch};
  return std::move(*t);
}

inline Result<IdentityContext, TokenError> validate_token(std::string_view token, std::string_view application,
                                                          const Clock& clock, ByteView secret) {
  auto t = verify_token(token, application, clock, secret);
  if (!t) return Failure{t.error()};
  return IdentityContext{t->identity, t->application, {AuthMethodKind::token, {}}, clock.now()};
}

/// Server-side record of spent nonces, for single-use token mode.
class NonceCache {
 public:
  /// True the first time a nonce is presented. Entries are dropped after expiry.
  bool consume(const Nonce& nonce, std::int64_t expires_at, std::int64_t now) {
    std::lock_guard lock(mu_);
    for (auto it = seen_.begin(); it != seen_.end();) {
      if (it->second <= now) it = seen_.erase(it);
      else ++it;
    }
    return seen_.emplace(to_hex(nonce), expires_at).second;
  }

  [[nodiscard]] std::size_t size() const {
    std::lock_guard lock(mu_);
    return seen_.size();
  }

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::int64_t> seen_;
};

}  // namespace usp
