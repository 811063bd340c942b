#pragma once

// Sans-I/O session executors. Each one owns a machine, a frame reader and the
// live authenticator, turns inbound bytes into events, and queues outbound
// bytes. The blocking agents and the fuzzer both drive these.

#include "usp/session.hpp"

#include <deque>

namespace usp {

using TraceFn = std::function<void(Direction, std::string_view)>;

namespace detail {

class ExecutorBase {
 public:
  Bytes take_output() { return std::exchange(output_, {}); }
  [[nodiscard]] bool has_output() const noexcept { return !output_.empty(); }
  [[nodiscard]] bool done() const noexcept { return done_; }
  [[nodiscard]] const std::optional<CloseCause>& close_cause() const noexcept { return close_; }

 protected:
  ExecutorBase(const ProtocolRegistry& protocols, RandomSource& rng, TraceFn trace, Direction inbound)
      : protocols_(protocols), rng_(rng), trace_(std::move(trace)), inbound_(inbound) {}

  void note(Direction d, std::string_view name) {
    if (trace_) trace_(d, name);
  }
  [[nodiscard]] Direction outbound() const noexcept {
    return inbound_ == Direction::client_to_server ? Direction::server_to_client : Direction::client_to_server;
  }

  void send(const Message& m) {
    Bytes frame = encode_frame(m);
    note(outbound(), message_name(m));
    output_.insert(output_.end(), frame.begin(), frame.end());
  }

  AuthStep begin_auth(const std::string& protocol, Role role, std::optional<ClientCredentials> creds) {
    const auto* d = protocols_.find(protocol);
    if (!d) throw std::logic_error("no authenticator registered for " + protocol);
    authenticator_ = d->begin(role, AuthConfig{std::move(creds), &rng_});
    return authenticator_->step(std::nullopt);
  }

  AuthStep step_auth(const Bytes& input) {
    if (!authenticator_) throw std::logic_error("authenticator stepped before it began");
    return authenticator_->step(ByteView(input));
  }

  /// Pulls the next inbound frame as an event, tracing it.
  std::optional<SessionEvent> next_frame_event() {
    auto r = reader_.next();
    if (!r) return std::nullopt;
    if (r->ok()) {
      note(inbound_, message_name(r->value()));
      return SessionEvent{FrameReceived{r->value()}};
    }
    note(inbound_, kMalformedTraceName);
    return SessionEvent{FrameMalformed{r->error()}};
  }

  const ProtocolRegistry& protocols_;
  RandomSource& rng_;
  TraceFn trace_;
  Direction inbound_;
  FrameReader reader_;
  std::unique_ptr<Authenticator> authenticator_;
  Bytes output_;
  bool done_ = false;
  std::optional<CloseCause> close_;
};

}  // namespace detail

class ServerConnection : public detail::ExecutorBase {
 public:
  ServerConnection(ServerEnv& env, const ProtocolRegistry& protocols, RandomSource& rng, TraceFn trace = {})
      : ExecutorBase(protocols, rng, std::move(trace), Direction::client_to_server), env_(env) {}

  void feed(ByteView bytes) {
    if (done_) return;
    reader_.feed(bytes);
    while (!done_) {
      auto ev = next_frame_event();
      if (!ev) break;
      if (!requested_application_)
        if (const auto* f = std::get_if<FrameReceived>(&*ev))
          if (const auto* init = std::get_if<Initialize>(&f->message))
            requested_application_ = init->streams.front().application;
      dispatch(std::move(*ev));
    }
  }

  /// Peer closed the stream. A partial frame at this point is lost with it.
  void on_eof() {
    if (!done_) dispatch(PeerClosed{});
  }
  void on_timeout() {
    if (!done_) dispatch(HandshakeTimeout{});
  }

  [[nodiscard]] const ServerSessionState& state() const noexcept { return state_; }
  [[nodiscard]] const std::optional<IdentityContext>& handed_off() const noexcept { return handoff_; }
  [[nodiscard]] const std::optional<std::string>& requested_application() const noexcept {
    return requested_application_;
  }

 private:
  void dispatch(SessionEvent first) {
    std::deque<SessionEvent> queue;
    queue.push_back(std::move(first));
    while (!queue.empty() && !done_) {
      auto ev = std::move(queue.front());
      queue.pop_front();
      auto out = server_step(state_, ev, env_);
      bool handoff = std::any_of(out.actions.begin(), out.actions.end(),
                                 [](const SessionAction& a) { return std::holds_alternative<Handoff>(a); });
      if (handoff && reader_.buffered() > 0) {
        // Bytes sent ahead of "connect" never reach the application.
        out = detail::fail_with_error<ServerSessionState, ServerClosed>(
            state_, CloseReason::protocol_violation, kErrProtocolViolation, "data before connect");
      }
      state_ = std::move(out.state);
      for (auto& action : out.actions) {
        std::visit(
            [&](auto& a) {
              using T = std::decay_t<decltype(a)>;
              if constexpr (std::is_same_v<T, Send>) {
                send(a.message);
              } else if constexpr (std::is_same_v<T, BeginAuth>) {
                queue.push_back(AuthStepResult{begin_auth(a.protocol, Role::server, std::nullopt)});
              } else if constexpr (std::is_same_v<T, StepAuth>) {
                queue.push_back(AuthStepResult{step_auth(a.input)});
              } else if constexpr (std::is_same_v<T, Handoff>) {
                handoff_ = a.identity;
                done_ = true;
              } else {
                close_ = a.cause;
                done_ = true;
              }
            },
            action);
      }
    }
  }

  ServerEnv& env_;
  ServerSessionState state_;
  std::optional<IdentityContext> handoff_;
  std::optional<std::string> requested_application_;
};

class ClientConnection : public detail::ExecutorBase {
 public:
  ClientConnection(ClientEnv env, std::map<std::string, std::string> tokens, std::optional<ClientCredentials> creds,
                   const ProtocolRegistry& protocols, const Clock& clock, RandomSource& rng, TraceFn trace = {})
      : ExecutorBase(protocols, rng, std::move(trace), Direction::server_to_client),
        env_(std::move(env)),
        creds_(std::move(creds)),
        clock_(clock) {
    state_.tokens = std::move(tokens);
  }

  void start() {
    env_.now = clock_.now();
    auto out = client_start(state_, env_);
    apply(std::move(out));
  }

  void feed(ByteView bytes) {
    if (done_) {
      trailing_.insert(trailing_.end(), bytes.begin(), bytes.end());
      return;
    }
    reader_.feed(bytes);
    while (!done_) {
      auto ev = next_frame_event();
      if (!ev) break;
      dispatch(std::move(*ev));
    }
    if (connected()) {
      Bytes rest = reader_.take_buffered();
      trailing_.insert(trailing_.end(), rest.begin(), rest.end());
    }
  }

  void on_eof() {
    if (!done_) dispatch(PeerClosed{});
  }
  void on_timeout() {
    if (!done_) dispatch(HandshakeTimeout{});
  }

  [[nodiscard]] const ClientSessionState& state() const noexcept { return state_; }
  [[nodiscard]] std::optional<IdentityContext> connected() const {
    if (const auto* c = std::get_if<ClientConnected>(&state_.phase)) return c->identity;
    return std::nullopt;
  }
  [[nodiscard]] const std::map<std::string, std::string>& tokens() const noexcept { return state_.tokens; }
  /// Application bytes that arrived together with "connect".
  Bytes take_trailing() { return std::exchange(trailing_, {}); }

 private:
  void dispatch(SessionEvent first) {
    std::deque<SessionEvent> queue;
    queue.push_back(std::move(first));
    while (!queue.empty() && !done_) {
      auto ev = std::move(queue.front());
      queue.pop_front();
      env_.now = clock_.now();
      auto more = apply(client_step(state_, ev, env_));
      for (auto& e : more) queue.push_back(std::move(e));
    }
  }

  std::vector<SessionEvent> apply(StepOutput<ClientSessionState> out) {
    state_ = std::move(out.state);
    std::vector<SessionEvent> follow_up;
    for (auto& action : out.actions) {
      std::visit(
          [&](auto& a) {
            using T = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<T, Send>) {
              send(a.message);
            } else if constexpr (std::is_same_v<T, BeginAuth>) {
              follow_up.emplace_back(AuthStepResult{begin_auth(a.protocol, Role::client, creds_)});
            } else if constexpr (std::is_same_v<T, StepAuth>) {
              follow_up.emplace_back(AuthStepResult{step_auth(a.input)});
            } else if constexpr (std::is_same_v<T, Handoff>) {
              done_ = true;
            } else {
              close_ = a.cause;
              done_ = true;
            }
          },
          action);
    }
    if (state_.terminal()) {
      done_ = true;
      if (const auto* c = std::get_if<ClientClosed>(&state_.phase)) close_ = c->cause;
    }
    return follow_up;
  }

  ClientEnv env_;
  std::optional<ClientCredentials> creds_;
  const Clock& clock_;
  ClientSessionState state_;
  Bytes trailing_;
};

}  // namespace usp
