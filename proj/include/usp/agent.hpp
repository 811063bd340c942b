#pragma once

// Server and client agents: the blocking executors that run the handshake
// machines over real streams. The server releases a stream to an application
// handler only after the handshake hands it off.

#include "usp/connection.hpp"
#include "usp/tcp.hpp"
#include "usp/transport.hpp"

#include <filesystem>
#include <fstream>
#include <list>
#include <unordered_map>

namespace usp {

using ApplicationHandler = std::function<void(StreamHandle&, const IdentityContext&)>;

struct ApplicationRegistration {
  std::string application;
  bool requires_auth = false;
  ApplicationHandler handler;
};

struct ServerConfig {
  std::vector<ApplicationRegistration> registry;
  std::vector<std::string> supported_auth;
  Bytes token_secret;
  std::int64_t token_ttl = kDefaultTokenTtl;
  unsigned max_auth_attempts = 1;
  std::int64_t handshake_timeout = 10;
  bool lenient_coexistence = false;
  bool single_use_tokens = false;
};

using LogSink = std::function<void(const std::string&)>;

/// Services a server runs with. Clock and randomness are injected so that
/// tests can run on virtual time and seeded entropy.
struct ServerRuntime {
  std::shared_ptr<const Clock> clock = std::make_shared<SystemClock>();
  std::shared_ptr<RandomSource> rng = std::make_shared<OsRandom>();
  std::shared_ptr<const ProtocolRegistry> protocols;
  LogSink log;
  /// Per-session trace observer, used when handle_connection gets none.
  std::function<TraceFn()> trace_factory;
};

inline void validate_config(const ServerConfig& cfg, const ProtocolRegistry& protocols) {
  std::set<std::string> names;
  bool any_auth = false;
  for (const auto& r : cfg.registry) {
    if (!detail::valid_name(r.application)) throw std::invalid_argument("invalid application name");
    if (!names.insert(r.application).second)
      throw std::invalid_argument("application " + r.application + " registered twice");
    if (!r.handler) throw std::invalid_argument("application " + r.application + " has no handler");
    any_auth = any_auth || r.requires_auth;
  }
  if (any_auth && cfg.supported_auth.empty())
    throw std::invalid_argument("supported_auth is empty but an application requires authentication");
  std::set<std::string> protos;
  for (const auto& p : cfg.supported_auth) {
    if (!protocols.find(p)) throw std::invalid_argument("no authenticator for protocol " + p);
    if (!protos.insert(p).second) throw std::invalid_argument("protocol " + p + " listed twice");
  }
  if (cfg.token_ttl <= 0) throw std::invalid_argument("token_ttl must be positive");
  if (cfg.max_auth_attempts == 0) throw std::invalid_argument("max_auth_attempts must be at least 1");
  if (cfg.handshake_timeout <= 0) throw std::invalid_argument("handshake_timeout must be positive");
  if (any_auth && cfg.token_secret.empty()) throw std::invalid_argument("token_secret is empty");
}

/// ServerEnv backed by the application registry and the token secret.
class RegistryEnv final : public ServerEnv {
 public:
  RegistryEnv(const ServerConfig& cfg, const Clock& clock, RandomSource& rng, NonceCache& spent)
      : cfg_(cfg), clock_(clock), rng_(rng), spent_(spent) {}

  bool application_hosted(std::string_view app) override { return find(app) != nullptr; }
  bool requires_auth(std::string_view app) override {
    const auto* r = find(app);
    return r && r->requires_auth;
  }
  std::optional<IdentityContext> token_valid(const StreamRequest& s) override {
    if (!s.token) return std::nullopt;
    auto t = verify_token(*s.token, s.application, clock_, cfg_.token_secret);
    if (!t) return std::nullopt;
    if (cfg_.single_use_tokens && !spent_.consume(t->nonce, t->expires_at, clock_.now())) return std::nullopt;
    return IdentityContext{t->identity, t->application, {AuthMethodKind::token, {}}, clock_.now()};
  }
  std::optional<std::string> negotiate_auth_protocol(std::span<const std::string> offered) override {
    return negotiate(offered, cfg_.supported_auth);
  }
  std::vector<StreamRequest> issue_tokens(const std::string& identity, std::span<const StreamRequest> streams) override {
    std::vector<StreamRequest> out;
    for (const auto& s : streams) {
      auto t = issue_token(identity, s.application, cfg_.token_ttl, clock_, cfg_.token_secret, rng_);
      out.push_back({s.application, t.encoded()});
    }
    return out;
  }
  [[nodiscard]] std::int64_t now() const override { return clock_.now(); }
  [[nodiscard]] ServerPolicy policy() const override {
    return {cfg_.max_auth_attempts, cfg_.lenient_coexistence};
  }

 private:
  const ApplicationRegistration* find(std::string_view app) const {
    for (const auto& r : cfg_.registry)
      if (r.application == app) return &r;
    return nullptr;
  }

  const ServerConfig& cfg_;
  const Clock& clock_;
  RandomSource& rng_;
  NonceCache& spent_;
};

struct SessionOutcome {
  std::string peer;
  std::string application;
  std::optional<IdentityContext> identity;  // set when handed off
  std::optional<CloseCause> cause;          // set when closed before handoff
  std::int64_t started_at = 0;
  std::int64_t finished_at = 0;

  [[nodiscard]] bool handed_off() const noexcept { return identity.has_value(); }

  [[nodiscard]] std::string log_line() const {
    nlohmann::ordered_json j;
    j["event"] = "session";
    j["started_at"] = started_at;
    j["finished_at"] = finished_at;
    j["peer"] = peer;
    j["application"] = application;
    j["outcome"] = handed_off() ? "handoff" : "closed";
    if (identity) {
      j["identity"] = identity->identity;
      j["method"] = identity->method.label();
    } else {
      j["reason"] = cause ? std::string(to_string(cause->reason)) : "unknown";
      if (cause && !cause->detail.empty()) j["detail"] = cause->detail;
    }
    return j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
  }
};

inline constexpr Millis kPollSlice{20};

class Server {
 public:
  Server(ServerConfig cfg, ServerRuntime rt) : cfg_(std::move(cfg)), rt_(std::move(rt)) {
    if (!rt_.protocols) throw std::invalid_argument("server runtime has no protocol registry");
    if (!rt_.clock || !rt_.rng) throw std::invalid_argument("server runtime lacks clock or random source");
    validate_config(cfg_, *rt_.protocols);
  }

  /// Runs one session to completion on the calling thread, including the
  /// application handler when the handshake hands off.
  SessionOutcome handle_connection(std::unique_ptr<StreamHandle> stream, TraceFn trace = {}) {
    SessionOutcome outcome;
    outcome.peer = stream->peer_label();
    outcome.started_at = rt_.clock->now();
    const auto deadline = outcome.started_at + cfg_.handshake_timeout;
    if (!trace && rt_.trace_factory) trace = rt_.trace_factory();

    RegistryEnv env(cfg_, *rt_.clock, *rt_.rng, spent_);
    ServerConnection conn(env, *rt_.protocols, *rt_.rng, std::move(trace));
    ++sessions_;
    bool lost = false;
    try {
      while (!conn.done()) {
        if (rt_.clock->now() >= deadline) {
          conn.on_timeout();
          break;
        }
        auto chunk = stream->read_for(kReadChunkBytes, kPollSlice);
        if (!chunk) continue;
        if (chunk->empty()) conn.on_eof();
        else conn.feed(*chunk);
        if (conn.has_output()) stream->write(conn.take_output());
      }
      if (conn.has_output()) stream->write(conn.take_output());
    } catch (const TransportError&) {
      lost = true;
    }

    outcome.application = conn.requested_application().value_or("");
    if (conn.handed_off() && !lost) {
      outcome.identity = conn.handed_off();
      ++handoffs_;
      if (const auto* reg = find(outcome.identity->application)) {
        try {
          reg->handler(*stream, *outcome.identity);
        } catch (const std::exception& e) {
          log(R"({"event":"handler_error","application":")" + outcome.application + R"(","what":)" +
              nlohmann::json(e.what()).dump() + "}");
        }
      }
    } else {
      outcome.cause = lost ? CloseCause{CloseReason::connection_lost, {}, std::nullopt}
                           : conn.close_cause().value_or(CloseCause{CloseReason::connection_lost, {}, std::nullopt});
    }
    stream->close();
    outcome.finished_at = rt_.clock->now();
    log(outcome.log_line());
    return outcome;
  }

  /// Sessions started; each has fixed its handshake deadline by the time it counts.
  [[nodiscard]] std::size_t sessions() const noexcept { return sessions_; }
  [[nodiscard]] std::size_t handoffs() const noexcept { return handoffs_; }
  [[nodiscard]] const ServerConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] const ServerRuntime& runtime() const noexcept { return rt_; }

 private:
  const ApplicationRegistration* find(std::string_view app) const {
    for (const auto& r : cfg_.registry)
      if (r.application == app) return &r;
    return nullptr;
  }
  void log(const std::string& line) {
    if (!rt_.log) return;
    std::lock_guard lock(log_mu_);
    rt_.log(line);
  }

  ServerConfig cfg_;
  ServerRuntime rt_;
  NonceCache spent_;
  std::mutex log_mu_;
  std::atomic<std::size_t> sessions_{0};
  std::atomic<std::size_t> handoffs_{0};
};

/// Accept loop with one thread per session. Stops on shutdown() or destruction.
class ServerHandle {
 public:
  ServerHandle(Server& server, Listener& listener) : server_(server), listener_(listener) {
    acceptor_ = std::thread([this] { accept_loop(); });
  }
  ServerHandle(const ServerHandle&) = delete;
  ServerHandle& operator=(const ServerHandle&) = delete;
  ~ServerHandle() { shutdown(); }

  void shutdown() {
    if (stopping_.exchange(true)) return;
    listener_.close();
    if (acceptor_.joinable()) acceptor_.join();
    {
      std::lock_guard lock(mu_);
      for (auto* s : live_) s->close();
    }
    for (auto& s : sessions_) s.thread.join();
    sessions_.clear();
  }

  /// Blocks until at least n sessions have finished, or the timeout passes.
  bool wait_for_completed(std::size_t n, Millis timeout) {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, timeout, [&] { return completed_ >= n; });
  }
  [[nodiscard]] std::size_t completed() const {
    std::lock_guard lock(mu_);
    return completed_;
  }
  [[nodiscard]] std::vector<SessionOutcome> outcomes() const {
    std::lock_guard lock(mu_);
    return outcomes_;
  }

 private:
  struct Session {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> finished;
  };

  void accept_loop() {
    while (!stopping_) {
      auto stream = listener_.accept_for(Millis(50));
      reap();
      if (!stream) continue;
      auto finished = std::make_shared<std::atomic<bool>>(false);
      StreamHandle* raw = stream.get();
      {
        std::lock_guard lock(mu_);
        live_.push_back(raw);
      }
      sessions_.push_back({std::thread([this, s = std::move(stream), finished, raw]() mutable {
                             SessionOutcome out;
                             try {
                               out = server_.handle_connection(std::move(s));
                             } catch (const std::exception& e) {
                               out.cause = CloseCause{CloseReason::connection_lost, e.what(), std::nullopt};
                             }
                             std::lock_guard lock(mu_);
                             live_.remove(raw);
                             outcomes_.push_back(std::move(out));
                             ++completed_;
                             finished->store(true);
                             cv_.notify_all();
                           }),
                           finished});
    }
  }

  void reap() {
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if (it->finished->load()) {
        it->thread.join();
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }

  Server& server_;
  Listener& listener_;
  std::thread acceptor_;
  std::list<Session> sessions_;  // touched by the acceptor, then by shutdown() after the join
  std::list<StreamHandle*> live_;
  std::vector<SessionOutcome> outcomes_;
  std::size_t completed_ = 0;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::atomic<bool> stopping_{false};
};

inline std::unique_ptr<ServerHandle> serve(Listener& listener, Server& server) {
  return std::make_unique<ServerHandle>(server, listener);
}

// ---------------------------------------------------------------------------
// Client.

enum class ClientErrorKind { remote_error, auth_failed, no_shared_protocol, timeout, protocol_violation, malformed,
                             connection_lost };

inline std::string_view to_string(ClientErrorKind k) noexcept {
  switch (k) {
    case ClientErrorKind::remote_error: return "remote error";
    case ClientErrorKind::auth_failed: return "auth failed";
    case ClientErrorKind::no_shared_protocol: return "no shared protocol";
    case ClientErrorKind::timeout: return "timeout";
    case ClientErrorKind::protocol_violation: return "protocol violation";
    case ClientErrorKind::malformed: return "malformed message";
    case ClientErrorKind::connection_lost: return "connection lost";
  }
  return "unknown";
}

class ClientError : public std::runtime_error {
 public:
  ClientError(ClientErrorKind kind, const std::string& detail)
      : std::runtime_error(detail.empty() ? std::string(to_string(kind))
                                          : std::string(to_string(kind)) + ": " + detail),
        kind_(kind),
        detail_(detail) {}
  [[nodiscard]] ClientErrorKind kind() const noexcept { return kind_; }
  [[nodiscard]] const std::string& detail() const noexcept { return detail_; }

 private:
  ClientErrorKind kind_;
  std::string detail_;
};

inline std::shared_ptr<const ProtocolRegistry> default_client_protocols() {
  static const auto registry = std::make_shared<const ProtocolRegistry>(std::vector{psk_protocol()});
  return registry;
}

struct ClientOptions {
  std::vector<std::string> offered{std::string(kPskProtocol)};
  std::optional<ClientCredentials> credentials;
  std::map<std::string, std::string> tokens;  // application -> token
  std::int64_t handshake_timeout = 10;
  std::shared_ptr<const Clock> clock = std::make_shared<SystemClock>();
  std::shared_ptr<RandomSource> rng = std::make_shared<OsRandom>();
  std::shared_ptr<const ProtocolRegistry> protocols = default_client_protocols();
  TraceFn trace;
};

struct ClientSession {
  std::unique_ptr<StreamHandle> stream;  // application-ready
  IdentityContext identity;
  MessageTrace trace;
  std::map<std::string, std::string> tokens;
};

namespace detail {

inline ClientError to_client_error(const CloseCause& c) {
  switch (c.reason) {
    case CloseReason::remote_error:
      if (c.detail.rfind(kErrNoSharedProtocol, 0) == 0) return {ClientErrorKind::no_shared_protocol, c.detail};
      return {ClientErrorKind::remote_error, c.detail};
    case CloseReason::auth_failed: return {ClientErrorKind::auth_failed, c.detail};
    case CloseReason::timeout: return {ClientErrorKind::timeout, c.detail};
    case CloseReason::malformed: return {ClientErrorKind::malformed, c.detail};
    case CloseReason::protocol_violation: return {ClientErrorKind::protocol_violation, c.detail};
    default: return {ClientErrorKind::connection_lost, std::string(to_string(c.reason))};
  }
}

inline ClientSession run_client(std::unique_ptr<StreamHandle> stream, std::vector<std::string> applications,
                                ClientMode mode, const ClientOptions& opt) {
  if (applications.empty()) throw std::invalid_argument("no application requested");
  bool all_tokens = std::all_of(applications.begin(), applications.end(),
                                [&](const std::string& a) { return opt.tokens.count(a) > 0; });
  if (opt.offered.empty() && !all_tokens)
    throw std::invalid_argument("initialize needs an offered protocol unless every stream carries a token");

  ClientSession result;
  auto trace = [&result, &opt](Direction d, std::string_view name) {
    result.trace.push_back({0, d, std::string(name)});
    if (opt.trace) opt.trace(d, name);
  };
  ClientEnv env{applications, opt.offered, mode, 0};
  ClientConnection conn(env, opt.tokens, opt.credentials, *opt.protocols, *opt.clock, *opt.rng, trace);
  const auto deadline = opt.clock->now() + opt.handshake_timeout;
  conn.start();
  try {
    stream->write(conn.take_output());
    while (!conn.done()) {
      if (opt.clock->now() >= deadline) {
        conn.on_timeout();
        break;
      }
      auto chunk = stream->read_for(kReadChunkBytes, kPollSlice);
      if (!chunk) continue;
      if (chunk->empty()) conn.on_eof();
      else conn.feed(*chunk);
      if (conn.has_output()) {
        try {
          stream->write(conn.take_output());
        } catch (const TransportError&) {
          conn.on_eof();
        }
      }
    }
    if (conn.has_output()) stream->write(conn.take_output());
  } catch (const TransportError&) {
    conn.on_eof();
  }

  result.tokens = conn.tokens();
  if (auto ctx = conn.connected()) {
    result.identity = *ctx;
    result.stream = std::make_unique<PrefixedStream>(std::move(stream), conn.take_trailing());
    return result;
  }
  stream->close();
  const auto& cause = conn.close_cause();
  if (mode == ClientMode::acquire_token && cause && cause->reason == CloseReason::tokens_acquired) return result;
  throw to_client_error(cause.value_or(CloseCause{CloseReason::connection_lost, {}, std::nullopt}));
}

}  // namespace detail

/// Handshake for one application. Returns only after "connect" arrived.
inline ClientSession connect(std::unique_ptr<StreamHandle> stream, const std::string& application,
                             const ClientOptions& opt) {
  return detail::run_client(std::move(stream), {application}, ClientMode::connect, opt);
}

/// Authenticates, collects the issued tokens and closes without connecting.
inline std::vector<StreamRequest> acquire_token(std::unique_ptr<StreamHandle> stream,
                                                const std::vector<std::string>& applications,
                                                const ClientOptions& opt) {
  auto session = detail::run_client(std::move(stream), applications, ClientMode::acquire_token, opt);
  std::vector<StreamRequest> out;
  for (const auto& app : applications)
    if (auto it = session.tokens.find(app); it != session.tokens.end()) out.push_back({app, it->second});
  return out;
}

// ---------------------------------------------------------------------------
// usp://host[:port]/application

struct Target {
  std::string host;
  std::uint16_t port = kDefaultPort;
  std::string application;
  bool operator==(const Target&) const = default;
};

class MalformedTarget : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Target parse_target(std::string_view url) {
  constexpr std::string_view scheme = "usp://";
  if (url.substr(0, scheme.size()) != scheme) throw MalformedTarget("target must start with usp://");
  auto rest = url.substr(scheme.size());
  auto slash = rest.find('/');
  if (slash == std::string_view::npos) throw MalformedTarget("target has no application");
  auto authority = rest.substr(0, slash);
  auto app = rest.substr(slash + 1);
  if (app.empty() || app.find('/') != std::string_view::npos || !detail::valid_name(app))
    throw MalformedTarget("invalid application in target");
  if (authority.empty()) throw MalformedTarget("target has no host");
  try {
    auto [host, port] = parse_host_port(authority);
    if (port == 0) throw MalformedTarget("port 0 in target");
    return {host, port, std::string(app)};
  } catch (const MalformedTarget&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw MalformedTarget(e.what());
  }
}

// ---------------------------------------------------------------------------
// Config files.

/// Built-in handlers for config-file servers.
inline ApplicationHandler builtin_handler(const std::string& name) {
  if (name == "echo") {
    return [](StreamHandle& s, const IdentityContext&) {
      for (;;) {
        Bytes b = s.read(kReadChunkBytes);
        if (b.empty()) return;
        s.write(b);
      }
    };
  }
  if (name == "whoami") {
    return [](StreamHandle& s, const IdentityContext& id) {
      s.write(as_bytes(id.to_json().dump() + "\n"));
    };
  }
  if (name == "discard") {
    return [](StreamHandle& s, const IdentityContext&) {
      while (!s.read(kReadChunkBytes).empty()) {
      }
    };
  }
  throw std::invalid_argument("unknown handler " + name);
}

struct LoadedServerConfig {
  ServerConfig config;
  std::string bind = "0.0.0.0:" + std::to_string(kDefaultPort);
  PskStore psk;
};

/// {"bind", "applications":[{"name","requires_auth","handler"}], "supported_auth",
///  "token_secret" (hex), "token_ttl", "max_auth_attempts", "handshake_timeout",
///  "lenient_coexistence", "single_use_tokens", "psk_store" (path)}
inline LoadedServerConfig parse_server_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  static const std::set<std::string> known = {"bind",           "applications",      "supported_auth",
                                              "token_secret",   "token_ttl",         "max_auth_attempts",
                                              "handshake_timeout", "lenient_coexistence", "single_use_tokens",
                                              "psk_store",      "psk"};
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown config field " + k);
  LoadedServerConfig out;
  auto& cfg = out.config;
  try {
    out.bind = j.value("bind", out.bind);
    for (const auto& a : j.at("applications")) {
      ApplicationRegistration r;
      r.application = a.at("name").get<std::string>();
      r.requires_auth = a.value("requires_auth", false);
      r.handler = builtin_handler(a.value("handler", std::string("echo")));
      cfg.registry.push_back(std::move(r));
    }
    cfg.supported_auth = j.value("supported_auth", std::vector<std::string>{});
    if (j.contains("token_secret")) {
      auto secret = from_hex(j.at("token_secret").get<std::string>());
      if (!secret) throw std::invalid_argument("token_secret must be hex");
      cfg.token_secret = *secret;
    }
    cfg.token_ttl = j.value("token_ttl", cfg.token_ttl);
    cfg.max_auth_attempts = j.value("max_auth_attempts", cfg.max_auth_attempts);
    cfg.handshake_timeout = j.value("handshake_timeout", cfg.handshake_timeout);
    cfg.lenient_coexistence = j.value("lenient_coexistence", false);
    cfg.single_use_tokens = j.value("single_use_tokens", false);
    if (j.contains("psk")) out.psk = parse_psk_store(j.at("psk"));
    if (j.contains("psk_store")) {
      std::filesystem::path p = j.at("psk_store").get<std::string>();
      if (p.is_relative()) p = base_dir / p;
      for (auto& [id, key] : load_psk_store(p.string())) out.psk[id] = key;
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  return out;
}

inline LoadedServerConfig load_server_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path);
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::invalid_argument("config " + path + " is not valid JSON");
  return parse_server_config(j, std::filesystem::path(path).parent_path());
}

}  // namespace usp
