#pragma once

// Client and server handshake state machines. Both are pure: a step maps
// (state, event, env) to (state', actions) and performs no I/O. The executor
// that drives them owns the transport and the authenticator objects.

#include "usp/auth.hpp"
#include "usp/token.hpp"
#include "usp/wire.hpp"

#include <map>

namespace usp {

enum class CloseReason {
  not_hosted,
  no_shared_protocol,
  auth_failed,
  malformed,
  protocol_violation,
  token_rejected,
  timeout,
  peer_closed,
  ignored_non_usp,
  remote_error,
  tokens_acquired,
  connection_lost,
};

inline std::string_view to_string(CloseReason r) noexcept {
  switch (r) {
    case CloseReason::not_hosted: return "not_hosted";
    case CloseReason::no_shared_protocol: return "no_shared_protocol";
    case CloseReason::auth_failed: return "auth_failed";
    case CloseReason::malformed: return "malformed";
    case CloseReason::protocol_violation: return "protocol_violation";
    case CloseReason::token_rejected: return "token_rejected";
    case CloseReason::timeout: return "timeout";
    case CloseReason::peer_closed: return "peer_closed";
    case CloseReason::ignored_non_usp: return "ignored_non_usp";
    case CloseReason::remote_error: return "remote_error";
    case CloseReason::tokens_acquired: return "tokens_acquired";
    case CloseReason::connection_lost: return "connection_lost";
  }
  return "unknown";
}

inline std::optional<CloseReason> close_reason_from_string(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(CloseReason::connection_lost); ++i) {
    auto r = static_cast<CloseReason>(i);
    if (to_string(r) == s) return r;
  }
  return std::nullopt;
}

struct CloseCause {
  CloseReason reason = CloseReason::protocol_violation;
  std::string detail;
  std::optional<MalformedKind> malformed;

  bool operator==(const CloseCause&) const = default;
};

// Error texts the server sends. Clients match on the prefix.
inline constexpr std::string_view kErrNotHosted = "application not hosted";
inline constexpr std::string_view kErrNoSharedProtocol = "no shared authentication protocol";
inline constexpr std::string_view kErrMalformed = "malformed message";
inline constexpr std::string_view kErrProtocolViolation = "protocol violation";
inline constexpr std::string_view kErrTokenRejected = "token rejected";

// ---------------------------------------------------------------------------
// Events and actions.

struct FrameReceived {
  Message message;
  bool operator==(const FrameReceived&) const = default;
};
struct FrameMalformed {
  WireError error;
  bool operator==(const FrameMalformed&) const = default;
};
struct AuthStepResult {
  AuthStep step;
  bool operator==(const AuthStepResult&) const = default;
};
struct HandshakeTimeout {
  bool operator==(const HandshakeTimeout&) const = default;
};
struct PeerClosed {
  bool operator==(const PeerClosed&) const = default;
};

using SessionEvent = std::variant<FrameReceived, FrameMalformed, AuthStepResult, HandshakeTimeout, PeerClosed>;

struct Send {
  Message message;
  bool operator==(const Send&) const = default;
};
/// Start a fresh authenticator for the protocol and step it once with no input.
struct BeginAuth {
  std::string protocol;
  bool operator==(const BeginAuth&) const = default;
};
/// Step the running authenticator with peer bytes.
struct StepAuth {
  Bytes input;
  bool operator==(const StepAuth&) const = default;
};
struct Handoff {
  IdentityContext identity;
  bool operator==(const Handoff&) const = default;
};
struct Close {
  CloseCause cause;
  bool operator==(const Close&) const = default;
};

using SessionAction = std::variant<Send, BeginAuth, StepAuth, Handoff, Close>;

/// Thrown when a machine in a terminal state is stepped.
class IllegalStep : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string describe(const SessionEvent& e) {
  return std::visit(
      [](const auto& ev) -> std::string {
        using T = std::decay_t<decltype(ev)>;
        if constexpr (std::is_same_v<T, FrameReceived>) return "frame(" + std::string(message_name(ev.message)) + ")";
        else if constexpr (std::is_same_v<T, FrameMalformed>) return "malformed(" + std::string(to_string(ev.error.kind)) + ")";
        else if constexpr (std::is_same_v<T, AuthStepResult>) {
          if (ev.step.succeeded()) return "auth(success)";
          if (ev.step.failed()) return "auth(fail)";
          return "auth(pending)";
        } else if constexpr (std::is_same_v<T, HandshakeTimeout>) return "timeout";
        else return "peer_closed";
      },
      e);
}

// ---------------------------------------------------------------------------
// Server.

struct ServerPolicy {
  unsigned max_auth_attempts = 1;
  bool lenient_coexistence = false;
};

/// Predicates and services the server machine consults, in the order
/// ApplicationHosted, RequiresAuth, TokenValid, NegotiateAuthProtocol.
class ServerEnv {
 public:
  virtual ~ServerEnv() = default;
  virtual bool application_hosted(std::string_view application) = 0;
  virtual bool requires_auth(std::string_view application) = 0;
  /// Called for every auth-requiring stream, with or without a token.
  virtual std::optional<IdentityContext> token_valid(const StreamRequest& stream) = 0;
  virtual std::optional<std::string> negotiate_auth_protocol(std::span<const std::string> offered) = 0;
  virtual std::vector<StreamRequest> issue_tokens(const std::string& identity,
                                                  std::span<const StreamRequest> streams) = 0;
  [[nodiscard]] virtual std::int64_t now() const = 0;
  [[nodiscard]] virtual ServerPolicy policy() const = 0;
};

struct ServerAwaitInitialize {
  bool operator==(const ServerAwaitInitialize&) const = default;
};
struct ServerAuthInProgress {
  std::string protocol;
  std::vector<StreamRequest> pending;
  bool operator==(const ServerAuthInProgress&) const = default;
};
struct ServerAwaitReinitialize {
  std::string identity;
  std::string protocol;
  bool operator==(const ServerAwaitReinitialize&) const = default;
};
struct ServerHandedOff {
  IdentityContext identity;
  bool operator==(const ServerHandedOff&) const = default;
};
struct ServerClosed {
  CloseCause cause;
  bool operator==(const ServerClosed&) const = default;
};

using ServerPhase =
    std::variant<ServerAwaitInitialize, ServerAuthInProgress, ServerAwaitReinitialize, ServerHandedOff, ServerClosed>;

struct ServerSessionState {
  ServerPhase phase = ServerAwaitInitialize{};
  unsigned attempts = 0;

  [[nodiscard]] bool terminal() const noexcept {
    return std::holds_alternative<ServerHandedOff>(phase) || std::holds_alternative<ServerClosed>(phase);
  }
  bool operator==(const ServerSessionState&) const = default;
};

template <class State>
struct StepOutput {
  State state;
  std::vector<SessionAction> actions;
};

namespace detail {

inline std::string error_text(std::string_view base, std::string_view detail) {
  std::string s(base);
  if (!detail.empty()) {
    s += ": ";
    s += detail;
  }
  return s;
}

template <class State, class ClosedPhase>
StepOutput<State> fail_with_error(State st, CloseReason reason, std::string_view base, std::string detail,
                                  std::optional<MalformedKind> kind = std::nullopt) {
  CloseCause cause{reason, detail, kind};
  st.phase = ClosedPhase{cause};
  return {std::move(st), {Send{Error{error_text(base, detail)}}, Close{std::move(cause)}}};
}

template <class State, class ClosedPhase>
StepOutput<State> close_silently(State st, CloseReason reason, std::string detail = {},
                                 std::optional<MalformedKind> kind = std::nullopt) {
  CloseCause cause{reason, std::move(detail), kind};
  st.phase = ClosedPhase{cause};
  return {std::move(st), {Close{std::move(cause)}}};
}

template <class State, class ClosedPhase>
StepOutput<State> on_malformed(State st, const WireError& err) {
  // An oversize prefix means the stream cannot be resynchronised; drop it.
  if (err.kind == MalformedKind::oversize)
    return close_silently<State, ClosedPhase>(std::move(st), CloseReason::malformed, err.detail, err.kind);
  return fail_with_error<State, ClosedPhase>(std::move(st), CloseReason::malformed, kErrMalformed,
                                             std::string(to_string(err.kind)), err.kind);
}

inline StepOutput<ServerSessionState> server_illegal(ServerSessionState st, const SessionEvent& ev) {
  return fail_with_error<ServerSessionState, ServerClosed>(std::move(st), CloseReason::protocol_violation,
                                                           kErrProtocolViolation, "unexpected " + describe(ev));
}

inline StepOutput<ServerSessionState> server_initialize(ServerSessionState st, const Initialize& init,
                                                        ServerEnv& env, bool reinitialize) {
  using Closed = ServerClosed;
  std::optional<IdentityContext> first_identity;
  bool needs_auth = false;
  for (std::size_t i = 0; i < init.streams.size(); ++i) {
    const auto& s = init.streams[i];
    if (!env.application_hosted(s.application))
      return fail_with_error<ServerSessionState, Closed>(std::move(st), CloseReason::not_hosted, kErrNotHosted,
                                                         s.application);
    std::optional<IdentityContext> identity;
    if (env.requires_auth(s.application)) {
      identity = env.token_valid(s);
      if (!identity) needs_auth = true;
    } else {
      // A token offered to an open application is ignored.
      identity = IdentityContext::anonymous(s.application, env.now());
    }
    if (i == 0) first_identity = identity;
  }

  if (!needs_auth) {
    auto ctx = *first_identity;
    if (const auto* re = std::get_if<ServerAwaitReinitialize>(&st.phase);
        re && ctx.method.kind == AuthMethodKind::token && ctx.identity == re->identity) {
      ctx.method = {AuthMethodKind::protocol, re->protocol};
    }
    st.phase = ServerHandedOff{ctx};
    return {std::move(st), {Send{Connect{init.streams.front().application}}, Handoff{std::move(ctx)}}};
  }

  if (reinitialize)
    return fail_with_error<ServerSessionState, Closed>(std::move(st), CloseReason::token_rejected,
                                                       kErrTokenRejected, init.streams.front().application);

  auto protocol = env.negotiate_auth_protocol(init.authentication);
  if (!protocol)
    return fail_with_error<ServerSessionState, Closed>(std::move(st), CloseReason::no_shared_protocol,
                                                       kErrNoSharedProtocol, {});
  st.phase = ServerAuthInProgress{*protocol, init.streams};
  st.attempts = 1;
  return {std::move(st), {Send{Authenticate{*protocol}}, BeginAuth{*protocol}}};
}

inline StepOutput<ServerSessionState> server_auth_result(ServerSessionState st, const AuthStep& step,
                                                         ServerEnv& env) {
  auto& auth = std::get<ServerAuthInProgress>(st.phase);
  std::vector<SessionAction> actions;
  if (step.outgoing) actions.emplace_back(Send{AuthData::from_bytes(*step.outgoing)});

  if (const auto* ok = std::get_if<AuthSuccess>(&step.status)) {
    if (ok->identity.empty()) {
      CloseCause cause{CloseReason::auth_failed, "empty identity", std::nullopt};
      st.phase = ServerClosed{cause};
      actions.emplace_back(Close{std::move(cause)});
      return {std::move(st), std::move(actions)};
    }
    auto tokens = env.issue_tokens(ok->identity, auth.pending);
    std::string protocol = auth.protocol;
    st.phase = ServerAwaitReinitialize{ok->identity, protocol};
    actions.emplace_back(Send{Token{std::move(tokens)}});
    return {std::move(st), std::move(actions)};
  }
  if (const auto* fail = std::get_if<AuthFail>(&step.status)) {
    if (st.attempts < env.policy().max_auth_attempts) {
      ++st.attempts;
      actions.emplace_back(BeginAuth{auth.protocol});
      return {std::move(st), std::move(actions)};
    }
    // No error frame: each side learns the outcome from its own authenticator.
    CloseCause cause{CloseReason::auth_failed, fail->reason, std::nullopt};
    st.phase = ServerClosed{cause};
    actions.emplace_back(Close{std::move(cause)});
    return {std::move(st), std::move(actions)};
  }
  return {std::move(st), std::move(actions)};
}

}  // namespace detail

inline ServerSessionState server_initial_state() { return {}; }

inline StepOutput<ServerSessionState> server_step(ServerSessionState st, const SessionEvent& ev, ServerEnv& env) {
  using detail::close_silently;
  if (st.terminal()) throw IllegalStep("server session already finished");

  if (std::holds_alternative<HandshakeTimeout>(ev))
    return close_silently<ServerSessionState, ServerClosed>(std::move(st), CloseReason::timeout);
  if (std::holds_alternative<PeerClosed>(ev))
    return close_silently<ServerSessionState, ServerClosed>(std::move(st), CloseReason::peer_closed);
  if (const auto* bad = std::get_if<FrameMalformed>(&ev)) {
    if (std::holds_alternative<ServerAwaitInitialize>(st.phase) && env.policy().lenient_coexistence)
      return close_silently<ServerSessionState, ServerClosed>(std::move(st), CloseReason::ignored_non_usp,
                                                              std::string(to_string(bad->error.kind)),
                                                              bad->error.kind);
    return detail::on_malformed<ServerSessionState, ServerClosed>(std::move(st), bad->error);
  }

  const auto* frame = std::get_if<FrameReceived>(&ev);
  const auto* auth_result = std::get_if<AuthStepResult>(&ev);

  if (std::holds_alternative<ServerAwaitInitialize>(st.phase)) {
    if (frame)
      if (const auto* init = std::get_if<Initialize>(&frame->message))
        return detail::server_initialize(std::move(st), *init, env, false);
    return detail::server_illegal(std::move(st), ev);
  }
  if (std::holds_alternative<ServerAuthInProgress>(st.phase)) {
    if (frame)
      if (const auto* data = std::get_if<AuthData>(&frame->message))
        return {std::move(st), {StepAuth{data->bytes()}}};
    if (auth_result) return detail::server_auth_result(std::move(st), auth_result->step, env);
    return detail::server_illegal(std::move(st), ev);
  }
  if (std::holds_alternative<ServerAwaitReinitialize>(st.phase)) {
    if (frame)
      if (const auto* init = std::get_if<Initialize>(&frame->message))
        return detail::server_initialize(std::move(st), *init, env, true);
    return detail::server_illegal(std::move(st), ev);
  }
  throw IllegalStep("server session in unknown phase");
}

// ---------------------------------------------------------------------------
// Client.

enum class ClientMode { connect, acquire_token };

struct ClientEnv {
  std::vector<std::string> applications;  // the first one is connected
  std::vector<std::string> offered;
  ClientMode mode = ClientMode::connect;
  std::int64_t now = 0;
};

struct ClientSendInitialize {
  bool operator==(const ClientSendInitialize&) const = default;
};
struct ClientAwaitResponse {
  bool operator==(const ClientAwaitResponse&) const = default;
};
struct ClientAuthInProgress {
  std::string protocol;
  bool operator==(const ClientAuthInProgress&) const = default;
};
struct ClientAwaitToken {
  std::string protocol;
  std::string identity;
  bool operator==(const ClientAwaitToken&) const = default;
};
struct ClientConnected {
  IdentityContext identity;
  bool operator==(const ClientConnected&) const = default;
};
struct ClientClosed {
  CloseCause cause;
  bool operator==(const ClientClosed&) const = default;
};

using ClientPhase = std::variant<ClientSendInitialize, ClientAwaitResponse, ClientAuthInProgress, ClientAwaitToken,
                                 ClientConnected, ClientClosed>;

struct ClientSessionState {
  ClientPhase phase = ClientSendInitialize{};
  std::map<std::string, std::string> tokens;  // application -> token
  std::optional<std::string> authenticated_identity;
  std::string authenticated_protocol;

  [[nodiscard]] bool terminal() const noexcept {
    return std::holds_alternative<ClientConnected>(phase) || std::holds_alternative<ClientClosed>(phase);
  }
  bool operator==(const ClientSessionState&) const = default;
};

namespace detail {

inline Initialize client_initialize(const ClientSessionState& st, const ClientEnv& env) {
  Initialize init;
  init.authentication = env.offered;
  for (const auto& app : env.applications) {
    StreamRequest req{app, std::nullopt};
    if (auto it = st.tokens.find(app); it != st.tokens.end()) req.token = it->second;
    init.streams.push_back(std::move(req));
  }
  return init;
}

inline StepOutput<ClientSessionState> client_illegal(ClientSessionState st, const SessionEvent& ev) {
  return fail_with_error<ClientSessionState, ClientClosed>(std::move(st), CloseReason::protocol_violation,
                                                           kErrProtocolViolation, "unexpected " + describe(ev));
}

inline StepOutput<ClientSessionState> client_remote_error(ClientSessionState st, const Error& e) {
  return close_silently<ClientSessionState, ClientClosed>(std::move(st), CloseReason::remote_error, e.error);
}

inline IdentityContext client_identity(const ClientSessionState& st, const ClientEnv& env) {
  const auto& app = env.applications.front();
  if (st.authenticated_identity)
    return {*st.authenticated_identity, app, {AuthMethodKind::protocol, st.authenticated_protocol}, env.now};
  if (auto it = st.tokens.find(app); it != st.tokens.end()) {
    auto parsed = parse_token(it->second);
    return {parsed ? parsed->identity : std::string("bearer"), app, {AuthMethodKind::token, {}}, env.now};
  }
  return IdentityContext::anonymous(app, env.now);
}

}  // namespace detail

/// Opening move: sends the first initialize.
inline StepOutput<ClientSessionState> client_start(ClientSessionState st, const ClientEnv& env) {
  if (!std::holds_alternative<ClientSendInitialize>(st.phase)) throw IllegalStep("client already started");
  if (env.applications.empty()) throw std::invalid_argument("client requests no application");
  auto init = detail::client_initialize(st, env);
  st.phase = ClientAwaitResponse{};
  return {std::move(st), {Send{std::move(init)}}};
}

inline StepOutput<ClientSessionState> client_step(ClientSessionState st, const SessionEvent& ev,
                                                  const ClientEnv& env) {
  using detail::close_silently;
  using Closed = ClientClosed;
  if (st.terminal()) throw IllegalStep("client session already finished");
  if (std::holds_alternative<ClientSendInitialize>(st.phase)) throw IllegalStep("client not started");

  bool authenticating =
      std::holds_alternative<ClientAuthInProgress>(st.phase) || std::holds_alternative<ClientAwaitToken>(st.phase);
  if (std::holds_alternative<HandshakeTimeout>(ev))
    return close_silently<ClientSessionState, Closed>(std::move(st), CloseReason::timeout);
  if (std::holds_alternative<PeerClosed>(ev)) {
    // The server closes without an error frame when authentication fails.
    return close_silently<ClientSessionState, Closed>(
        std::move(st), authenticating ? CloseReason::auth_failed : CloseReason::peer_closed);
  }
  if (const auto* bad = std::get_if<FrameMalformed>(&ev))
    return detail::on_malformed<ClientSessionState, Closed>(std::move(st), bad->error);

  const auto* frame = std::get_if<FrameReceived>(&ev);
  const auto* auth_result = std::get_if<AuthStepResult>(&ev);
  if (frame)
    if (const auto* e = std::get_if<Error>(&frame->message)) return detail::client_remote_error(std::move(st), *e);

  if (std::holds_alternative<ClientAwaitResponse>(st.phase)) {
    if (!frame) return detail::client_illegal(std::move(st), ev);
    if (const auto* c = std::get_if<Connect>(&frame->message)) {
      if (c->application != env.applications.front()) return detail::client_illegal(std::move(st), ev);
      auto ctx = detail::client_identity(st, env);
      st.phase = ClientConnected{std::move(ctx)};
      return {std::move(st), {}};
    }
    if (const auto* a = std::get_if<Authenticate>(&frame->message)) {
      if (std::find(env.offered.begin(), env.offered.end(), a->protocol) == env.offered.end())
        return detail::fail_with_error<ClientSessionState, Closed>(std::move(st), CloseReason::protocol_violation,
                                                                   kErrProtocolViolation,
                                                                   "unoffered protocol " + a->protocol);
      st.phase = ClientAuthInProgress{a->protocol};
      return {std::move(st), {BeginAuth{a->protocol}}};
    }
    return detail::client_illegal(std::move(st), ev);
  }

  if (const auto* auth = std::get_if<ClientAuthInProgress>(&st.phase)) {
    if (frame)
      if (const auto* data = std::get_if<AuthData>(&frame->message)) return {std::move(st), {StepAuth{data->bytes()}}};
    if (!auth_result) return detail::client_illegal(std::move(st), ev);
    std::vector<SessionAction> actions;
    const auto& step = auth_result->step;
    if (step.outgoing) actions.emplace_back(Send{AuthData::from_bytes(*step.outgoing)});
    if (const auto* ok = std::get_if<AuthSuccess>(&step.status)) {
      st.phase = ClientAwaitToken{auth->protocol, ok->identity};
    } else if (const auto* fail = std::get_if<AuthFail>(&step.status)) {
      CloseCause cause{CloseReason::auth_failed, fail->reason, std::nullopt};
      st.phase = ClientClosed{cause};
      actions.emplace_back(Close{std::move(cause)});
    }
    return {std::move(st), std::move(actions)};
  }

  if (const auto* wait = std::get_if<ClientAwaitToken>(&st.phase)) {
    if (!frame) return detail::client_illegal(std::move(st), ev);
    if (const auto* data = std::get_if<AuthData>(&frame->message)) {
      // The server restarted authentication after a failed attempt.
      std::string protocol = wait->protocol;
      st.phase = ClientAuthInProgress{protocol};
      return {std::move(st), {BeginAuth{protocol}, StepAuth{data->bytes()}}};
    }
    if (const auto* t = std::get_if<Token>(&frame->message)) {
      for (const auto& s : t->streams)
        if (s.token) st.tokens[s.application] = *s.token;
      if (!st.tokens.count(env.applications.front())) return detail::client_illegal(std::move(st), ev);
      st.authenticated_identity = wait->identity;
      st.authenticated_protocol = wait->protocol;
      if (env.mode == ClientMode::acquire_token)
        return close_silently<ClientSessionState, Closed>(std::move(st), CloseReason::tokens_acquired);
      auto init = detail::client_initialize(st, env);
      st.phase = ClientAwaitResponse{};
      return {std::move(st), {Send{std::move(init)}}};
    }
    return detail::client_illegal(std::move(st), ev);
  }
  throw IllegalStep("client session in unknown phase");
}

// ---------------------------------------------------------------------------
// Traces.

enum class Direction { client_to_server, server_to_client };

struct TraceEntry {
  unsigned session = 0;
  Direction direction = Direction::client_to_server;
  std::string message;  // message name, or "<malformed>"

  bool operator==(const TraceEntry&) const = default;
};

using MessageTrace = std::vector<TraceEntry>;

inline constexpr std::string_view kMalformedTraceName = "<malformed>";

inline std::string to_string(const TraceEntry& e) {
  std::string s = e.direction == Direction::client_to_server ? "->" : "<-";
  return s + e.message;
}

inline std::string to_string(const MessageTrace& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) s += ", ";
    if (i == 0 || t[i].session != t[i - 1].session) s += "#" + std::to_string(t[i].session) + " ";
    s += to_string(t[i]);
  }
  return s + "]";
}

/// Handshake messages, excluding authenticator traffic.
inline std::size_t count_handshake_messages(const MessageTrace& t, std::optional<unsigned> session = std::nullopt) {
  return static_cast<std::size_t>(std::count_if(t.begin(), t.end(), [&](const TraceEntry& e) {
    return e.message != "authdata" && (!session || e.session == *session);
  }));
}

inline std::string trace_to_jsonl(const MessageTrace& t) {
  std::string out;
  for (const auto& e : t) {
    nlohmann::ordered_json j;
    j["session"] = e.session;
    j["dir"] = e.direction == Direction::client_to_server ? "c2s" : "s2c";
    j["message"] = e.message;
    out += j.dump() + "\n";
  }
  return out;
}

inline MessageTrace trace_from_jsonl(std::string_view text) {
  MessageTrace t;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    auto j = nlohmann::json::parse(line);
    TraceEntry e;
    e.session = j.at("session").get<unsigned>();
    auto dir = j.at("dir").get<std::string>();
    if (dir != "c2s" && dir != "s2c") throw std::invalid_argument("bad trace direction " + dir);
    e.direction = dir == "c2s" ? Direction::client_to_server : Direction::server_to_client;
    e.message = j.at("message").get<std::string>();
    t.push_back(std::move(e));
  }
  return t;
}

}  // namespace usp
