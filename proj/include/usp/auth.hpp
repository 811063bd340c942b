#pragma once

#include "usp/common.hpp"
#include "usp/wire.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <memory>

namespace usp {

enum class Role { client, server };

struct AuthPending {
  bool operator==(const AuthPending&) const = default;
};
struct AuthSuccess {
  std::string identity;
  bool operator==(const AuthSuccess&) const = default;
};
struct AuthFail {
  std::string reason;
  bool operator==(const AuthFail&) const = default;
};

using AuthStatus = std::variant<AuthPending, AuthSuccess, AuthFail>;

struct AuthStep {
  std::optional<Bytes> outgoing;
  AuthStatus status;

  [[nodiscard]] bool pending() const noexcept { return std::holds_alternative<AuthPending>(status); }
  [[nodiscard]] bool succeeded() const noexcept { return std::holds_alternative<AuthSuccess>(status); }
  [[nodiscard]] bool failed() const noexcept { return std::holds_alternative<AuthFail>(status); }

  bool operator==(const AuthStep&) const = default;
};

/// One side of one authentication exchange. Single session, single thread.
/// Once a step reports Success or Fail, further steps throw std::logic_error.
class Authenticator {
 public:
  virtual ~Authenticator() = default;
  virtual AuthStep step(std::optional<ByteView> incoming) = 0;
};

struct ClientCredentials {
  std::string identity;
  Bytes key;
};

struct AuthConfig {
  std::optional<ClientCredentials> credentials;  // client role
  RandomSource* rng = nullptr;                   // required by challenge generators
};

struct AuthProtocolDescriptor {
  std::string name;
  unsigned max_rounds = 0;
  std::function<std::unique_ptr<Authenticator>(Role, const AuthConfig&)> begin;
};

/// Named authenticators, immutable once built and safe to share.
class ProtocolRegistry {
 public:
  ProtocolRegistry() = default;
  explicit ProtocolRegistry(std::vector<AuthProtocolDescriptor> protocols) {
    for (auto& p : protocols) add(std::move(p));
  }

  void add(AuthProtocolDescriptor d) {
    if (!detail::valid_name(d.name)) throw std::invalid_argument("invalid protocol name");
    if (!d.begin) throw std::invalid_argument("protocol " + d.name + " has no begin function");
    if (find(d.name)) throw std::invalid_argument("duplicate protocol " + d.name);
    protocols_.push_back(std::move(d));
  }

  [[nodiscard]] const AuthProtocolDescriptor* find(std::string_view name) const {
    for (const auto& p : protocols_)
      if (p.name == name) return &p;
    return nullptr;
  }

  [[nodiscard]] std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& p : protocols_) out.push_back(p.name);
    return out;
  }

 private:
  std::vector<AuthProtocolDescriptor> protocols_;
};

/// Server preference wins: the first supported protocol the client offered.
inline std::optional<std::string> negotiate(std::span<const std::string> client_offered,
                                            std::span<const std::string> server_supported) {
  for (const auto& s : server_supported) {
    if (std::find(client_offered.begin(), client_offered.end(), s) != client_offered.end()) return s;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// psk-cr: server sends a 32-byte challenge, client answers with
// identity || HMAC-SHA-256(key, challenge).

inline constexpr std::string_view kPskProtocol = "psk-cr";
inline constexpr std::size_t kPskChallengeBytes = 32;

using PskStore = std::map<std::string, Bytes, std::less<>>;

namespace detail {

class PskServer final : public Authenticator {
 public:
  PskServer(std::shared_ptr<const PskStore> store, RandomSource& rng)
      : store_(std::move(store)), rng_(rng) {}

  AuthStep step(std::optional<ByteView> incoming) override {
    if (done_) throw std::logic_error("psk-cr: step after completion");
    ++rounds_;
    if (rounds_ == 1) {
      if (incoming) return finish(AuthFail{"round overflow"});
      challenge_ = rng_.bytes(kPskChallengeBytes);
      return AuthStep{challenge_, AuthPending{}};
    }
    if (rounds_ > 2 || !incoming) return finish(AuthFail{"round overflow"});
    auto response = *incoming;
    if (response.size() <= kMacBytes) return finish(AuthFail{"bad response"});
    std::string identity = to_string(response.first(response.size() - kMacBytes));
    auto it = store_->find(identity);
    if (it == store_->end()) return finish(AuthFail{"unknown identity"});
    Mac expected = hmac_sha256(it->second, challenge_);
    if (!constant_time_equal(expected, response.last(kMacBytes))) return finish(AuthFail{"bad response"});
    return finish(AuthSuccess{identity});
  }

 private:
  AuthStep finish(AuthStatus s) {
    done_ = true;
    return AuthStep{std::nullopt, std::move(s)};
  }

  std::shared_ptr<const PskStore> store_;
  RandomSource& rng_;
  Bytes challenge_;
  unsigned rounds_ = 0;
  bool done_ = false;
};

class PskClient final : public Authenticator {
 public:
  explicit PskClient(std::optional<ClientCredentials> creds) : creds_(std::move(creds)) {}

  AuthStep step(std::optional<ByteView> incoming) override {
    if (done_) throw std::logic_error("psk-cr: step after completion");
    // Opening step: nothing to send until the challenge arrives.
    if (!incoming) return AuthStep{std::nullopt, AuthPending{}};
    done_ = true;
    if (!creds_) return AuthStep{std::nullopt, AuthFail{"no credentials"}};
    if (incoming->size() != kPskChallengeBytes) return AuthStep{std::nullopt, AuthFail{"bad challenge"}};
    Bytes response = to_bytes(creds_->identity);
    Mac mac = hmac_sha256(creds_->key, *incoming);
    response.insert(response.end(), mac.begin(), mac.end());
    // Local part complete; the server's verdict arrives as a token or a close.
    return AuthStep{std::move(response), AuthSuccess{creds_->identity}};
  }

 private:
  std::optional<ClientCredentials> creds_;
  bool done_ = false;
};

}  // namespace detail

inline AuthProtocolDescriptor psk_protocol(PskStore shared_secrets = {}) {
  auto store = std::make_shared<const PskStore>(std::move(shared_secrets));
  AuthProtocolDescriptor d;
  d.name = std::string(kPskProtocol);
  d.max_rounds = 2;
  d.begin = [store](Role role, const AuthConfig& cfg) -> std::unique_ptr<Authenticator> {
    if (role == Role::client) return std::make_unique<detail::PskClient>(cfg.credentials);
    if (!cfg.rng) throw std::invalid_argument("psk-cr server requires a random source");
    return std::make_unique<detail::PskServer>(store, *cfg.rng);
  };
  return d;
}

/// PSK credential store: JSON object mapping identity to a hex key.
inline PskStore parse_psk_store(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("psk store must be a JSON object");
  PskStore out;
  for (const auto& [identity, key] : j.items()) {
    if (!detail::valid_name(identity)) throw std::invalid_argument("invalid psk identity: " + identity);
    if (!key.is_string()) throw std::invalid_argument("psk key for " + identity + " must be a hex string");
    auto bytes = from_hex(key.get<std::string>());
    if (!bytes || bytes->empty()) throw std::invalid_argument("psk key for " + identity + " is not hex");
    out.emplace(identity, std::move(*bytes));
  }
  return out;
}

inline PskStore load_psk_store(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open psk store " + path);
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::invalid_argument("psk store " + path + " is not valid JSON");
  return parse_psk_store(j);
}

}  // namespace usp
