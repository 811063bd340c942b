#pragma once

// Deterministic scenario runner, malformed-input fuzzer and exhaustive
// server-machine enumerator.

#include "usp/agent.hpp"

#include <sstream>

namespace usp::harness {

enum class TransportKind { memory, tcp };

inline std::string_view to_string(TransportKind t) noexcept { return t == TransportKind::memory ? "memory" : "tcp"; }

struct ScenarioApp {
  std::string name;
  bool requires_auth = false;
};

struct ScenarioServer {
  std::vector<ScenarioApp> applications;
  std::vector<std::string> supported_auth;
  PskStore psk;
  unsigned max_auth_attempts = 1;
  bool lenient_coexistence = false;
  bool single_use_tokens = false;
  std::int64_t token_ttl = kDefaultTokenTtl;
  std::int64_t handshake_timeout = 10;
};

enum class StepKind { connect, acquire, raw };

struct ScenarioStep {
  StepKind kind = StepKind::connect;
  std::vector<std::string> applications;
  std::vector<std::string> offered;
  std::optional<ClientCredentials> credentials;
  bool use_acquired_tokens = false;  // present tokens from earlier acquire steps
  Bytes raw;                          // raw: bytes written verbatim
  std::int64_t advance_clock = 0;     // raw: virtual seconds to jump once the server is waiting
};

struct Scenario {
  std::string name;
  ScenarioServer server;
  std::vector<ScenarioStep> steps;
  MessageTrace expected_trace;
  std::size_t expected_handoffs = 0;
  std::optional<CloseReason> expected_close;  // of the last session; nullopt = handed off
  std::uint64_t seed = 1;
};

struct StepResult {
  bool connected = false;
  std::optional<IdentityContext> identity;
  std::optional<ClientErrorKind> error;
  std::string error_text;
  std::vector<StreamRequest> tokens;
  MessageTrace client_trace;
};

struct ScenarioRun {
  MessageTrace trace;
  std::size_t handoffs = 0;
  std::optional<CloseReason> close_reason;
  std::vector<SessionOutcome> sessions;
  std::vector<StepResult> steps;
  std::vector<std::string> log;
};

class ScenarioMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Canonical flows.

inline const Bytes& demo_key() {
  static const Bytes key = *from_hex("00112233445566778899aabbccddeeff00112233445566778899aabbccddeeff");
  return key;
}

inline ScenarioServer canonical_server() {
  ScenarioServer s;
  s.applications = {{"echo", false}, {"vault", true}, {"http", true}};
  s.supported_auth = {std::string(kPskProtocol)};
  s.psk = {{"alice", demo_key()}};
  return s;
}

inline MessageTrace make_trace(std::initializer_list<std::pair<unsigned, std::string_view>> entries) {
  MessageTrace t;
  for (auto [session, text] : entries) {
    TraceEntry e;
    e.session = session;
    e.direction = text.substr(0, 2) == "->" ? Direction::client_to_server : Direction::server_to_client;
    e.message = std::string(text.substr(2));
    t.push_back(std::move(e));
  }
  return t;
}

inline std::vector<Scenario> canonical_scenarios() {
  const std::vector<std::string> psk{std::string(kPskProtocol)};
  const ClientCredentials alice{"alice", demo_key()};
  Bytes wrong_key = demo_key();
  wrong_key[0] ^= 0x01;

  std::vector<Scenario> out;
  auto add = [&](std::string name, std::vector<ScenarioStep> steps, MessageTrace trace, std::size_t handoffs,
                 std::optional<CloseReason> close) {
    Scenario s;
    s.name = std::move(name);
    s.server = canonical_server();
    s.steps = std::move(steps);
    s.expected_trace = std::move(trace);
    s.expected_handoffs = handoffs;
    s.expected_close = close;
    out.push_back(std::move(s));
  };

  add("unauthenticated-direct", {{StepKind::connect, {"echo"}, psk, std::nullopt, false, {}, 0}},
      make_trace({{0, "->initialize"}, {0, "<-connect"}}), 1, std::nullopt);

  add("authenticated-direct", {{StepKind::connect, {"vault"}, psk, alice, false, {}, 0}},
      make_trace({{0, "->initialize"},
                  {0, "<-authenticate"},
                  {0, "<-authdata"},
                  {0, "->authdata"},
                  {0, "<-token"},
                  {0, "->initialize"},
                  {0, "<-connect"}}),
      1, std::nullopt);

  add("token-passing",
      {{StepKind::acquire, {"vault"}, psk, alice, false, {}, 0},
       {StepKind::connect, {"vault"}, {}, std::nullopt, true, {}, 0}},
      make_trace({{0, "->initialize"},
                  {0, "<-authenticate"},
                  {0, "<-authdata"},
                  {0, "->authdata"},
                  {0, "<-token"},
                  {1, "->initialize"},
                  {1, "<-connect"}}),
      1, std::nullopt);

  add("no-shared-protocol", {{StepKind::connect, {"vault"}, {"x509"}, alice, false, {}, 0}},
      make_trace({{0, "->initialize"}, {0, "<-error"}}), 0, CloseReason::no_shared_protocol);

  add("auth-failure", {{StepKind::connect, {"vault"}, psk, ClientCredentials{"alice", wrong_key}, false, {}, 0}},
      make_trace({{0, "->initialize"}, {0, "<-authenticate"}, {0, "<-authdata"}, {0, "->authdata"}}), 0,
      CloseReason::auth_failed);

  add("application-not-hosted", {{StepKind::connect, {"ghost"}, psk, std::nullopt, false, {}, 0}},
      make_trace({{0, "->initialize"}, {0, "<-error"}}), 0, CloseReason::not_hosted);

  add("malformed-message", {{StepKind::raw, {}, {}, std::nullopt, false, raw_frame(as_bytes("<garbage>")), 0}},
      make_trace({{0, "-><malformed>"}, {0, "<-error"}}), 0, CloseReason::malformed);

  return out;
}

/// Flows beyond the seven diagrams: timeout, coexistence, single-use tokens.
inline std::vector<Scenario> extra_scenarios() {
  std::vector<Scenario> out;
  {
    Scenario s;
    s.name = "handshake-timeout";
    s.server = canonical_server();
    s.steps = {{StepKind::raw, {}, {}, std::nullopt, false, {}, 11}};
    s.expected_close = CloseReason::timeout;
    out.push_back(std::move(s));
  }
  {
    Scenario s;
    s.name = "coexistence-fallback";
    s.server = canonical_server();
    s.server.lenient_coexistence = true;
    s.steps = {{StepKind::raw, {}, {}, std::nullopt, false, raw_frame(as_bytes("GET / HTTP/1.1\r\n\r\n")), 0}};
    s.expected_trace = make_trace({{0, "-><malformed>"}});
    s.expected_close = CloseReason::ignored_non_usp;
    out.push_back(std::move(s));
  }
  {
    Scenario s;
    s.name = "single-use-token-replay";
    s.server = canonical_server();
    s.server.single_use_tokens = true;
    const std::vector<std::string> psk{std::string(kPskProtocol)};
    s.steps = {{StepKind::acquire, {"vault"}, psk, ClientCredentials{"alice", demo_key()}, false, {}, 0},
               {StepKind::connect, {"vault"}, psk, std::nullopt, true, {}, 0},
               {StepKind::connect, {"vault"}, psk, std::nullopt, true, {}, 0}};
    s.expected_trace = make_trace({{0, "->initialize"},
                                   {0, "<-authenticate"},
                                   {0, "<-authdata"},
                                   {0, "->authdata"},
                                   {0, "<-token"},
                                   {1, "->initialize"},
                                   {1, "<-connect"},
                                   {2, "->initialize"},
                                   {2, "<-authenticate"},
                                   {2, "<-authdata"}});
    s.expected_handoffs = 1;
    s.expected_close = CloseReason::peer_closed;
    out.push_back(std::move(s));
  }
  return out;
}

inline std::optional<Scenario> find_scenario(std::string_view name) {
  for (auto& list : {canonical_scenarios(), extra_scenarios()})
    for (const auto& s : list)
      if (s.name == name) return s;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Scenario JSON.

inline nlohmann::json to_json(const Scenario& s) {
  nlohmann::ordered_json j;
  j["name"] = s.name;
  j["seed"] = s.seed;
  nlohmann::ordered_json server;
  for (const auto& a : s.server.applications)
    server["applications"].push_back({{"name", a.name}, {"requires_auth", a.requires_auth}});
  server["supported_auth"] = s.server.supported_auth;
  nlohmann::ordered_json psk = nlohmann::ordered_json::object();
  for (const auto& [id, key] : s.server.psk) psk[id] = to_hex(key);
  server["psk"] = psk;
  server["max_auth_attempts"] = s.server.max_auth_attempts;
  server["lenient_coexistence"] = s.server.lenient_coexistence;
  server["single_use_tokens"] = s.server.single_use_tokens;
  server["token_ttl"] = s.server.token_ttl;
  server["handshake_timeout"] = s.server.handshake_timeout;
  j["server"] = server;
  for (const auto& st : s.steps) {
    nlohmann::ordered_json step;
    step["op"] = st.kind == StepKind::connect ? "connect" : st.kind == StepKind::acquire ? "acquire" : "raw";
    if (st.kind != StepKind::raw) {
      step["applications"] = st.applications;
      step["offered"] = st.offered;
      if (st.credentials) {
        step["identity"] = st.credentials->identity;
        step["key"] = to_hex(st.credentials->key);
      }
      if (st.use_acquired_tokens) step["use_acquired_tokens"] = true;
    } else {
      step["hex"] = to_hex(st.raw);
      if (st.advance_clock) step["advance_clock"] = st.advance_clock;
    }
    j["steps"].push_back(step);
  }
  nlohmann::ordered_json expected;
  expected["trace"] = nlohmann::ordered_json::array();
  for (const auto& e : s.expected_trace)
    expected["trace"].push_back({{"session", e.session},
                                 {"dir", e.direction == Direction::client_to_server ? "c2s" : "s2c"},
                                 {"message", e.message}});
  expected["handoffs"] = s.expected_handoffs;
  expected["close"] = s.expected_close ? std::string(usp::to_string(*s.expected_close)) : "handoff";
  j["expected"] = expected;
  return nlohmann::json::parse(j.dump());
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
  Scenario s;
  try {
    s.name = j.at("name").get<std::string>();
    s.seed = j.value("seed", std::uint64_t{1});
    const auto& server = j.at("server");
    for (const auto& a : server.at("applications"))
      s.server.applications.push_back({a.at("name").get<std::string>(), a.value("requires_auth", false)});
    s.server.supported_auth = server.value("supported_auth", std::vector<std::string>{});
    if (server.contains("psk")) s.server.psk = parse_psk_store(server.at("psk"));
    s.server.max_auth_attempts = server.value("max_auth_attempts", 1u);
    s.server.lenient_coexistence = server.value("lenient_coexistence", false);
    s.server.single_use_tokens = server.value("single_use_tokens", false);
    s.server.token_ttl = server.value("token_ttl", kDefaultTokenTtl);
    s.server.handshake_timeout = server.value("handshake_timeout", std::int64_t{10});
    for (const auto& st : j.at("steps")) {
      ScenarioStep step;
      auto op = st.at("op").get<std::string>();
      if (op == "connect" || op == "acquire") {
        step.kind = op == "connect" ? StepKind::connect : StepKind::acquire;
        step.applications = st.at("applications").get<std::vector<std::string>>();
        step.offered = st.value("offered", std::vector<std::string>{});
        if (st.contains("identity")) {
          auto key = from_hex(st.at("key").get<std::string>());
          if (!key) throw std::invalid_argument("scenario key is not hex");
          step.credentials = ClientCredentials{st.at("identity").get<std::string>(), *key};
        }
        step.use_acquired_tokens = st.value("use_acquired_tokens", false);
      } else if (op == "raw") {
        step.kind = StepKind::raw;
        auto raw = from_hex(st.value("hex", std::string{}));
        if (!raw) throw std::invalid_argument("scenario raw bytes are not hex");
        step.raw = *raw;
        step.advance_clock = st.value("advance_clock", std::int64_t{0});
      } else {
        throw std::invalid_argument("unknown scenario op " + op);
      }
      s.steps.push_back(std::move(step));
    }
    const auto& expected = j.at("expected");
    for (const auto& e : expected.at("trace")) {
      auto dir = e.at("dir").get<std::string>();
      if (dir != "c2s" && dir != "s2c") throw std::invalid_argument("bad trace direction " + dir);
      s.expected_trace.push_back({e.at("session").get<unsigned>(),
                                  dir == "c2s" ? Direction::client_to_server : Direction::server_to_client,
                                  e.at("message").get<std::string>()});
    }
    s.expected_handoffs = expected.at("handoffs").get<std::size_t>();
    auto close = expected.at("close").get<std::string>();
    if (close != "handoff") {
      s.expected_close = close_reason_from_string(close);
      if (!s.expected_close) throw std::invalid_argument("unknown close reason " + close);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("scenario: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Running.

namespace detail {

inline std::shared_ptr<const ProtocolRegistry> server_protocols(const ScenarioServer& s) {
  return std::make_shared<const ProtocolRegistry>(std::vector{psk_protocol(s.psk)});
}

inline ServerConfig make_server_config(const ScenarioServer& s, ApplicationHandler handler) {
  ServerConfig cfg;
  for (const auto& a : s.applications) cfg.registry.push_back({a.name, a.requires_auth, handler});
  cfg.supported_auth = s.supported_auth;
  cfg.token_secret = to_bytes("scenario token secret");
  cfg.token_ttl = s.token_ttl;
  cfg.max_auth_attempts = s.max_auth_attempts;
  cfg.handshake_timeout = s.handshake_timeout;
  cfg.lenient_coexistence = s.lenient_coexistence;
  cfg.single_use_tokens = s.single_use_tokens;
  return cfg;
}

inline StepResult run_step(const ScenarioStep& step, StreamHandle* raw_stream, std::unique_ptr<StreamHandle> stream,
                           const std::map<std::string, std::string>& acquired,
                           const std::shared_ptr<ManualClock>& clock, std::uint64_t seed,
                           const std::function<void()>& wait_for_server) {
  StepResult r;
  if (step.kind == StepKind::raw) {
    FrameIo io(*raw_stream);
    try {
      if (!step.raw.empty()) raw_stream->write(step.raw);
      if (step.advance_clock) {
        wait_for_server();
        clock->advance(step.advance_clock);
      }
      for (;;) {
        auto got = io.recv(Millis(5000));
        if (auto* m = std::get_if<Message>(&got)) {
          r.client_trace.push_back({0, Direction::server_to_client, std::string(message_name(*m))});
          continue;
        }
        break;
      }
    } catch (const TransportError&) {
    }
    raw_stream->close();
    return r;
  }

  ClientOptions opt;
  opt.offered = step.offered;
  opt.credentials = step.credentials;
  if (step.use_acquired_tokens) opt.tokens = acquired;
  opt.clock = clock;
  opt.rng = std::make_shared<SeededRandom>(seed);
  try {
    if (step.kind == StepKind::acquire) {
      r.tokens = acquire_token(std::move(stream), step.applications, opt);
    } else {
      auto session = connect(std::move(stream), step.applications.front(), opt);
      r.connected = true;
      r.identity = session.identity;
      r.client_trace = session.trace;
      session.stream->close();
    }
  } catch (const ClientError& e) {
    r.error = e.kind();
    r.error_text = e.what();
  }
  return r;
}

}  // namespace detail

/// Runs every step against a fresh server on virtual time and seeded RNG.
inline ScenarioRun run_scenario(const Scenario& s, TransportKind transport) {
  ScenarioRun run;
  auto clock = std::make_shared<ManualClock>();
  std::mutex mu;
  std::atomic<unsigned> session_index{0};

  ServerRuntime rt;
  rt.clock = clock;
  rt.rng = std::make_shared<SeededRandom>(s.seed);
  rt.protocols = detail::server_protocols(s.server);
  rt.log = [&](const std::string& line) {
    std::lock_guard lock(mu);
    run.log.push_back(line);
  };
  rt.trace_factory = [&]() -> TraceFn {
    unsigned idx = session_index.load();
    return [&run, &mu, idx](Direction d, std::string_view name) {
      std::lock_guard lock(mu);
      run.trace.push_back({idx, d, std::string(name)});
    };
  };
  auto handler = [](StreamHandle&, const IdentityContext&) {};
  Server server(detail::make_server_config(s.server, handler), rt);

  std::map<std::string, std::string> acquired;
  std::unique_ptr<TcpListener> listener;
  std::unique_ptr<ServerHandle> handle;
  if (transport == TransportKind::tcp) {
    listener = std::make_unique<TcpListener>("127.0.0.1", 0);
    handle = serve(*listener, server);
  }

  for (std::size_t i = 0; i < s.steps.size(); ++i) {
    session_index = static_cast<unsigned>(i);
    const auto& step = s.steps[i];
    auto wait_for_server = [&server, i] {
      while (server.sessions() <= i) std::this_thread::sleep_for(Millis(1));
    };
    std::thread server_thread;
    std::unique_ptr<StreamHandle> client;
    if (transport == TransportKind::memory) {
      auto [c, srv] = memory_pair({}, "scenario#" + std::to_string(i));
      client = std::move(c);
      server_thread = std::thread([&server, &run, &mu, srv = std::move(srv)]() mutable {
        auto out = server.handle_connection(std::move(srv));
        std::lock_guard lock(mu);
        run.sessions.push_back(std::move(out));
      });
    } else {
      client = tcp_dial("127.0.0.1", listener->port());
    }
    StreamHandle* raw = client.get();
    auto result = detail::run_step(step, raw, std::move(client), acquired, clock, s.seed * 7919 + i, wait_for_server);
    for (const auto& t : result.tokens)
      if (t.token) acquired[t.application] = *t.token;
    run.steps.push_back(std::move(result));
    if (transport == TransportKind::memory) {
      server_thread.join();
    } else if (!handle->wait_for_completed(i + 1, Millis(10'000))) {
      throw ScenarioMismatch(s.name + ": server session " + std::to_string(i) + " did not finish");
    }
  }
  if (handle) {
    handle->shutdown();
    run.sessions = handle->outcomes();
  }
  run.handoffs = server.handoffs();
  if (!run.sessions.empty()) {
    const auto& last = run.sessions.back();
    if (!last.handed_off() && last.cause) run.close_reason = last.cause->reason;
  }
  return run;
}

/// First divergence between the run and the scenario's expectations.
inline std::optional<std::string> check_scenario(const Scenario& s, const ScenarioRun& run) {
  const auto& want = s.expected_trace;
  const auto& got = run.trace;
  for (std::size_t i = 0; i < std::max(want.size(), got.size()); ++i) {
    if (i >= want.size() || i >= got.size() || !(want[i] == got[i])) {
      std::ostringstream os;
      os << "trace diverges at entry " << i << ": expected "
         << (i < want.size() ? "#" + std::to_string(want[i].session) + " " + usp::to_string(want[i]) : "<end>")
         << ", got " << (i < got.size() ? "#" + std::to_string(got[i].session) + " " + usp::to_string(got[i]) : "<end>")
         << " (full: " << usp::to_string(got) << ")";
      return os.str();
    }
  }
  if (run.handoffs != s.expected_handoffs)
    return "expected " + std::to_string(s.expected_handoffs) + " handoffs, got " + std::to_string(run.handoffs);
  if (run.close_reason != s.expected_close) {
    auto name = [](const std::optional<CloseReason>& r) {
      return r ? std::string(usp::to_string(*r)) : std::string("handoff");
    };
    return "expected final outcome " + name(s.expected_close) + ", got " + name(run.close_reason);
  }
  return std::nullopt;
}

inline ScenarioRun assert_scenario(const Scenario& s, TransportKind transport) {
  auto run = run_scenario(s, transport);
  if (auto m = check_scenario(s, run))
    throw ScenarioMismatch(s.name + " [" + std::string(to_string(transport)) + "]: " + *m);
  return run;
}

// ---------------------------------------------------------------------------
// Fuzzing.

enum class FuzzClass { random_bytes, truncated_frame, oversize_frame, wrong_schema, wrong_phase };
inline constexpr std::size_t kFuzzClasses = 5;

inline std::string_view to_string(FuzzClass c) noexcept {
  switch (c) {
    case FuzzClass::random_bytes: return "random_bytes";
    case FuzzClass::truncated_frame: return "truncated_frame";
    case FuzzClass::oversize_frame: return "oversize_frame";
    case FuzzClass::wrong_schema: return "wrong_schema";
    case FuzzClass::wrong_phase: return "wrong_phase";
  }
  return "unknown";
}

struct FuzzReport {
  std::uint64_t seed = 0;
  std::size_t cases = 0;
  std::size_t handoffs = 0;
  std::size_t crashes = 0;
  std::size_t error_frames = 0;
  std::size_t silent_closes = 0;
  std::map<std::string, std::size_t> per_class;
  std::vector<std::string> findings;  // first few defects, replayable by seed and case index

  [[nodiscard]] bool passed() const noexcept { return handoffs == 0 && crashes == 0; }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["cases"] = cases;
    j["handoffs"] = handoffs;
    j["crashes"] = crashes;
    j["responses"] = {{"error-frame", error_frames}, {"silent-close", silent_closes}};
    j["classes"] = per_class;
    j["findings"] = findings;
    return nlohmann::json::parse(j.dump());
  }
};

class FuzzInputs {
 public:
  explicit FuzzInputs(std::uint64_t seed) : rng_(seed) {}

  Bytes generate(FuzzClass c) {
    switch (c) {
      case FuzzClass::random_bytes: return random_bytes(uniform(0, 256));
      case FuzzClass::truncated_frame: {
        Bytes frame = encode_frame(valid_message());
        frame.resize(uniform(0, frame.size() - 1));
        return frame;
      }
      case FuzzClass::oversize_frame: {
        Bytes out;
        auto len = static_cast<std::uint32_t>(kMaxFrameBytes + 1 + uniform(0, 0xFFFFFFFFull - kMaxFrameBytes - 1));
        put_u32(out, len);
        Bytes tail = random_bytes(uniform(0, 64));
        out.insert(out.end(), tail.begin(), tail.end());
        return out;
      }
      case FuzzClass::wrong_schema: return raw_frame(as_bytes(wrong_schema_payload()));
      case FuzzClass::wrong_phase: return wrong_phase();
    }
    return {};
  }

  std::size_t uniform(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

 private:
  Bytes random_bytes(std::size_t n) {
    Bytes b(n);
    for (auto& x : b) x = static_cast<std::uint8_t>(uniform(0, 255));
    return b;
  }

  std::string pick(std::initializer_list<std::string_view> options) {
    auto i = uniform(0, options.size() - 1);
    return std::string(*(options.begin() + static_cast<std::ptrdiff_t>(i)));
  }

  std::string app() { return pick({"echo", "vault", "http", "ghost"}); }

  Message valid_message() {
    switch (uniform(0, 5)) {
      case 0: return Initialize{{"psk-cr"}, {{app(), std::nullopt}}};
      case 1: return Connect{app()};
      case 2: return Authenticate{"psk-cr"};
      case 3: return Token{{{app(), base64_encode(random_bytes(40))}}};
      case 4: return Error{"fuzz"};
      default: return AuthData::from_bytes(random_bytes(uniform(0, 48)));
    }
  }

  // A schema-valid message, then one mutation that must break validity.
  std::string wrong_schema_payload() {
    for (;;) {
      auto j = nlohmann::json::parse(to_json_text(valid_message()));
      mutate(j);
      if (!validate_structure(j).ok()) return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    }
  }

  void mutate(nlohmann::json& j) {
    std::vector<std::string> keys;
    for (const auto& [k, _] : j.items()) keys.push_back(k);
    const auto key = keys[uniform(0, keys.size() - 1)];
    switch (uniform(0, 9)) {
      case 0: j.erase(key); break;
      case 1: j[key] = 42; break;
      case 2: j["extra"] = "field"; break;
      case 3: j["message"] = pick({"bogus", "INITIALIZE", "", "connect2"}); break;
      case 4: j = nlohmann::json::array({j}); break;
      case 5: j = pick({"initialize", "null", "1"}); break;
      case 6: j[key] = ""; break;
      case 7:
        if (j.contains("streams")) j["streams"] = nlohmann::json::array();
        else j[key] = nlohmann::json::array();
        break;
      case 8:
        if (j.contains("streams")) j["streams"][0]["application"] = std::string("ec\x01ho");
        else j[key] = std::string(300, 'a');
        break;
      default:
        if (j.contains("streams")) j["streams"][0]["token"] = 7;
        else if (j.contains("authentication")) j["authentication"] = {"psk-cr", "psk-cr"};
        else j[key] = nullptr;
        break;
    }
  }

  // Valid frames out of order. None of these can legitimately reach a handoff.
  Bytes wrong_phase() {
    Bytes out;
    auto append = [&](const Message& m) {
      Bytes f = encode_frame(m);
      out.insert(out.end(), f.begin(), f.end());
    };
    const std::string forged = base64_encode(random_bytes(uniform(60, 120)));
    switch (uniform(0, 5)) {
      case 0: append(Connect{app()}); break;
      case 1: append(Token{{{pick({"vault", "http"}), forged}}}); break;
      case 2: append(pick({"a", "b"}) == "a" ? Message{Authenticate{"psk-cr"}} : Message{AuthData{"AAAA"}}); break;
      case 3:
        append(Initialize{{"psk-cr"}, {{pick({"vault", "http"}), forged}}});
        append(pick({"c", "t", "i"}) == "c" ? Message{Connect{"vault"}}
                                            : Message{Initialize{{"psk-cr"}, {{"vault", forged}}}});
        break;
      case 4:
        append(Initialize{{"psk-cr"}, {{"vault", std::nullopt}}});
        append(AuthData::from_bytes(random_bytes(uniform(0, 80))));
        append(Initialize{{"psk-cr"}, {{"vault", forged}}});
        break;
      default:
        append(Initialize{{"psk-cr"}, {{"ghost", std::nullopt}}});
        append(Connect{"echo"});
        break;
    }
    return out;
  }

  std::mt19937_64 rng_;
};

namespace detail {

struct FuzzTarget {
  explicit FuzzTarget(const ScenarioServer& s)
      : config(make_server_config(s, [](StreamHandle&, const IdentityContext&) {})),
        protocols(server_protocols(s)),
        rng(0) {
    validate_config(config, *protocols);
  }
  ServerConfig config;
  std::shared_ptr<const ProtocolRegistry> protocols;
  ManualClock clock;
  SeededRandom rng;
  NonceCache spent;
};

// Replays one input through the blocking server over a memory pair.
inline bool end_to_end_handoff(const FuzzTarget& target, const Bytes& input) {
  ServerRuntime rt;
  rt.clock = std::make_shared<ManualClock>();
  rt.rng = std::make_shared<SeededRandom>(0);
  rt.protocols = target.protocols;
  Server server(target.config, rt);
  auto [client, srv] = memory_pair({}, "fuzz");
  try {
    client->write(input);
  } catch (const TransportError&) {
  }
  client->close();
  (void)server.handle_connection(std::move(srv));
  return server.handoffs() > 0;
}

}  // namespace detail

/// Every this many cases also run through the blocking server.
inline constexpr std::size_t kEndToEndEvery = 50;

/// Feeds n generated inputs to fresh server sessions and counts handoffs,
/// crashes and the kind of response each input drew.
inline FuzzReport fuzz_malformed(std::uint64_t seed, std::size_t n, const ScenarioServer& server = canonical_server()) {
  if (n == 0) throw std::invalid_argument("fuzz needs at least one case");
  FuzzReport report;
  report.seed = seed;
  detail::FuzzTarget target(server);
  FuzzInputs inputs(seed);

  for (std::size_t i = 0; i < n; ++i) {
    auto cls = static_cast<FuzzClass>(i % kFuzzClasses);
    ++report.per_class[std::string(to_string(cls))];
    ++report.cases;
    try {
      Bytes input = inputs.generate(cls);
      RegistryEnv env(target.config, target.clock, target.rng, target.spent);
      ServerConnection conn(env, *target.protocols, target.rng);
      // Random chunking; the outcome must not depend on it.
      std::size_t pos = 0;
      while (pos < input.size() && !conn.done()) {
        std::size_t len = inputs.uniform(1, input.size() - pos);
        conn.feed(ByteView(input).subspan(pos, len));
        pos += len;
      }
      if (!conn.done()) conn.on_eof();
      if (conn.handed_off()) {
        ++report.handoffs;
        if (report.findings.size() < 10)
          report.findings.push_back("case " + std::to_string(i) + " handed off: " + to_hex(input));
      }
      FrameReader responses;
      Bytes out = conn.take_output();
      responses.feed(out);
      bool error_frame = false;
      while (auto r = responses.next())
        if (r->ok() && std::holds_alternative<Error>(r->value())) error_frame = true;
      ++(error_frame ? report.error_frames : report.silent_closes);
      if (i % kEndToEndEvery == 0 && end_to_end_handoff(target, input)) {
        ++report.handoffs;
        if (report.findings.size() < 10)
          report.findings.push_back("case " + std::to_string(i) + " handed off end to end: " + to_hex(input));
      }
    } catch (const std::exception& e) {
      ++report.crashes;
      if (report.findings.size() < 10)
        report.findings.push_back("case " + std::to_string(i) + " threw: " + e.what());
    } catch (...) {
      ++report.crashes;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Exhaustive enumeration of the server machine.

struct EnumerationOptions {
  unsigned max_auth_attempts = 1;
  bool lenient_coexistence = false;
  /// Mutant: accept any presented token. Used to show the checker catches it.
  bool skip_token_check = false;
};

struct ReachabilityReport {
  std::size_t sequences = 0;  // maximal event sequences explored
  std::size_t steps = 0;
  std::size_t handoffs = 0;
  std::set<std::string> phases_reached;
  std::set<CloseReason> causes_reached;
  std::set<CloseReason> causes_missing;
};

class CounterexampleFound : public std::runtime_error {
 public:
  CounterexampleFound(const std::string& what, std::vector<std::string> events)
      : std::runtime_error(what), events_(std::move(events)) {}
  [[nodiscard]] const std::vector<std::string>& events() const noexcept { return events_; }

 private:
  std::vector<std::string> events_;
};

namespace detail {

inline constexpr std::string_view kPreIssued = "pre-issued";

// Symbolic environment: "open" needs no auth, "vault" does, anything else is
// unhosted. Valid tokens are "pre-issued" and whatever the run issued.
class SymbolicEnv final : public ServerEnv {
 public:
  explicit SymbolicEnv(EnumerationOptions opt) : opt_(opt) {}

  bool application_hosted(std::string_view app) override { return app == "open" || app == "vault"; }
  bool requires_auth(std::string_view app) override { return app == "vault"; }
  std::optional<IdentityContext> token_valid(const StreamRequest& s) override {
    if (!s.token) return std::nullopt;
    bool ok = opt_.skip_token_check || *s.token == kPreIssued || issued_.count(*s.token);
    if (!ok) return std::nullopt;
    return IdentityContext{"holder", s.application, {AuthMethodKind::token, {}}, 0};
  }
  std::optional<std::string> negotiate_auth_protocol(std::span<const std::string> offered) override {
    static const std::vector<std::string> supported{std::string(kPskProtocol)};
    return negotiate(offered, supported);
  }
  std::vector<StreamRequest> issue_tokens(const std::string&, std::span<const StreamRequest> streams) override {
    std::vector<StreamRequest> out;
    for (const auto& s : streams) {
      std::string t = "issued-" + std::to_string(issued_.size() + 1);
      issued_.insert(t);
      out.push_back({s.application, t});
    }
    return out;
  }
  [[nodiscard]] std::int64_t now() const override { return 0; }
  [[nodiscard]] ServerPolicy policy() const override { return {opt_.max_auth_attempts, opt_.lenient_coexistence}; }

 private:
  EnumerationOptions opt_;
  std::set<std::string> issued_;
};

struct LabeledEvent {
  std::string label;
  SessionEvent event;
};

inline std::vector<LabeledEvent> enumeration_alphabet() {
  const std::vector<std::string> psk{std::string(kPskProtocol)};
  auto init = [&](std::string app, std::optional<std::string> token, std::vector<std::string> offered) {
    return SessionEvent{FrameReceived{Initialize{std::move(offered), {{std::move(app), std::move(token)}}}}};
  };
  return {
      {"init(open)", init("open", std::nullopt, psk)},
      {"init(vault)", init("vault", std::nullopt, psk)},
      {"init(vault,forged)", init("vault", "forged", psk)},
      {"init(vault,pre-issued)", init("vault", std::string(kPreIssued), psk)},
      {"init(vault,issued-1)", init("vault", "issued-1", psk)},
      {"init(vault,x509)", init("vault", std::nullopt, {"x509"})},
      {"init(ghost)", init("ghost", std::nullopt, psk)},
      {"connect", SessionEvent{FrameReceived{Connect{"vault"}}}},
      {"authenticate", SessionEvent{FrameReceived{Authenticate{"psk-cr"}}}},
      {"token", SessionEvent{FrameReceived{Token{{{"vault", "forged"}}}}}},
      {"error", SessionEvent{FrameReceived{Error{"x"}}}},
      {"authdata", SessionEvent{FrameReceived{AuthData{"AAAA"}}}},
      {"malformed(not_json)", SessionEvent{FrameMalformed{{MalformedKind::not_json, "payload"}}}},
      {"malformed(oversize)", SessionEvent{FrameMalformed{{MalformedKind::oversize, "length prefix"}}}},
      {"auth(pending)", SessionEvent{AuthStepResult{{Bytes{1, 2, 3}, AuthPending{}}}}},
      {"auth(success)", SessionEvent{AuthStepResult{{std::nullopt, AuthSuccess{"alice"}}}}},
      {"auth(fail)", SessionEvent{AuthStepResult{{std::nullopt, AuthFail{"bad response"}}}}},
      {"timeout", SessionEvent{HandshakeTimeout{}}},
      {"peer_closed", SessionEvent{PeerClosed{}}},
  };
}

inline std::string phase_name(const ServerSessionState& st) {
  static constexpr std::string_view names[] = {"AwaitInitialize", "AuthInProgress", "AwaitReinitialize", "HandedOff",
                                               "Closed"};
  return std::string(names[st.phase.index()]);
}

struct Explorer {
  const std::vector<LabeledEvent>& alphabet;
  EnumerationOptions options;
  std::size_t max_events;
  ReachabilityReport report;
  std::vector<std::string> path;

  [[noreturn]] void counterexample(const std::string& why) {
    std::string seq;
    for (const auto& p : path) seq += (seq.empty() ? "" : " ") + p;
    throw CounterexampleFound(why + " after [" + seq + "]", path);
  }

  // `valid` is the checker's own record of genuinely valid tokens.
  void explore(const ServerSessionState& st, const SymbolicEnv& env, const std::set<std::string>& valid) {
    report.phases_reached.insert(phase_name(st));
    if (st.terminal()) {
      ++report.sequences;
      SymbolicEnv probe = env;
      try {
        (void)server_step(st, PeerClosed{}, probe);
        counterexample("terminal state accepted an event");
      } catch (const IllegalStep&) {
      }
      if (const auto* c = std::get_if<ServerClosed>(&st.phase)) report.causes_reached.insert(c->cause.reason);
      return;
    }
    if (path.size() >= max_events) {
      ++report.sequences;
      return;
    }
    for (const auto& e : alphabet) {
      SymbolicEnv next_env = env;
      auto out = server_step(st, e.event, next_env);
      ++report.steps;
      path.push_back(e.label);
      auto next_valid = valid;
      for (const auto& a : out.actions) {
        if (const auto* send = std::get_if<Send>(&a)) {
          if (const auto* tok = std::get_if<Token>(&send->message))
            for (const auto& s : tok->streams) next_valid.insert(*s.token);
          if (const auto* err = std::get_if<Error>(&send->message); err && std::holds_alternative<ServerClosed>(out.state.phase) &&
                                                                     std::get<ServerClosed>(out.state.phase).cause.reason ==
                                                                         CloseReason::auth_failed)
            counterexample("error frame on authentication failure");
        }
        if (const auto* h = std::get_if<Handoff>(&a)) {
          ++report.handoffs;
          const auto* frame = std::get_if<FrameReceived>(&e.event);
          const auto* init = frame ? std::get_if<Initialize>(&frame->message) : nullptr;
          if (!init) counterexample("handoff without an initialize");
          const auto& req = init->streams.front();
          if (req.application == "vault") {
            if (!req.token || !valid.count(*req.token)) counterexample("handoff of vault without a valid token");
          } else if (req.application != "open") {
            counterexample("handoff of unhosted application " + req.application);
          }
          if (h->identity.application != req.application) counterexample("handoff identity names another application");
        }
      }
      explore(out.state, next_env, next_valid);
      path.pop_back();
    }
  }
};

}  // namespace detail

/// Drives server_step over every event sequence up to max_events long and
/// checks the gate: a handoff only for an open application or a genuinely
/// valid token. Throws CounterexampleFound on the first violation.
inline ReachabilityReport enumerate_machine(std::size_t max_events, EnumerationOptions options = {}) {
  if (max_events > 10) throw std::invalid_argument("max_events must be at most 10");
  auto alphabet = detail::enumeration_alphabet();
  detail::Explorer ex{alphabet, options, max_events, {}, {}};
  ex.explore(server_initial_state(), detail::SymbolicEnv(options), {std::string(detail::kPreIssued)});
  std::vector<CloseReason> expected = {CloseReason::not_hosted,        CloseReason::no_shared_protocol,
                                       CloseReason::auth_failed,       CloseReason::malformed,
                                       CloseReason::protocol_violation, CloseReason::token_rejected,
                                       CloseReason::timeout,           CloseReason::peer_closed};
  if (options.lenient_coexistence) expected.push_back(CloseReason::ignored_non_usp);
  for (auto r : expected)
    if (!ex.report.causes_reached.count(r)) ex.report.causes_missing.insert(r);
  return ex.report;
}

}  // namespace usp::harness
