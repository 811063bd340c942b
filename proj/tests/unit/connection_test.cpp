#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace usp;

namespace {

struct Pair {
  ServerConfig cfg;
  ManualClock clock;
  SeededRandom server_rng{31};
  SeededRandom client_rng{32};
  NonceCache spent;
  ProtocolRegistry server_protocols{std::vector{psk_protocol({{"alice", test::test_key()}})}};
  ProtocolRegistry client_protocols{std::vector{psk_protocol()}};
  MessageTrace trace;

  Pair() {
    auto noop = [](StreamHandle&, const IdentityContext&) {};
    cfg.registry = {{"echo", false, noop}, {"vault", true, noop}};
    cfg.supported_auth = {"psk-cr"};
    cfg.token_secret = to_bytes("secret");
  }

  TraceFn tracer() {
    return [this](Direction d, std::string_view n) { trace.push_back({0, d, std::string(n)}); };
  }

  // Shuttles bytes until neither side has output; chunk bounds the slice size.
  void pump(ServerConnection& s, ClientConnection& c, std::size_t chunk = SIZE_MAX) {
    for (int guard = 0; guard < 100; ++guard) {
      bool moved = false;
      if (c.has_output()) {
        Bytes b = c.take_output();
        for (std::size_t i = 0; i < b.size(); i += chunk) s.feed(ByteView(b).subspan(i, std::min(chunk, b.size() - i)));
        moved = true;
      }
      if (s.has_output()) {
        Bytes b = s.take_output();
        for (std::size_t i = 0; i < b.size(); i += chunk) c.feed(ByteView(b).subspan(i, std::min(chunk, b.size() - i)));
        moved = true;
      }
      if (!moved) return;
    }
    FAIL() << "pump did not settle";
  }
};

}  // namespace

TEST(Connection, AuthenticatedHandshake) {
  for (std::size_t chunk : {std::size_t{1}, std::size_t{3}, std::size_t{64}, SIZE_MAX}) {
    Pair p;
    RegistryEnv env(p.cfg, p.clock, p.server_rng, p.spent);
    ServerConnection s(env, p.server_protocols, p.server_rng, p.tracer());
    ClientConnection c({{"vault"}, {"psk-cr"}, ClientMode::connect, 0}, {}, ClientCredentials{"alice", test::test_key()},
                       p.client_protocols, p.clock, p.client_rng);
    c.start();
    p.pump(s, c, chunk);
    ASSERT_TRUE(s.handed_off()) << chunk;
    EXPECT_EQ(s.handed_off()->identity, "alice");
    ASSERT_TRUE(c.connected());
    EXPECT_EQ(c.connected()->identity, "alice");
    EXPECT_EQ(to_string(p.trace),
              "[#0 ->initialize, <-authenticate, <-authdata, ->authdata, <-token, ->initialize, <-connect]");
  }
}

TEST(Connection, WrongKeyEndsWithoutErrorFrame) {
  Pair p;
  Bytes wrong = test::test_key();
  wrong[0] ^= 1;
  RegistryEnv env(p.cfg, p.clock, p.server_rng, p.spent);
  ServerConnection s(env, p.server_protocols, p.server_rng, p.tracer());
  ClientConnection c({{"vault"}, {"psk-cr"}, ClientMode::connect, 0}, {}, ClientCredentials{"alice", wrong},
                     p.client_protocols, p.clock, p.client_rng);
  c.start();
  p.pump(s, c);
  EXPECT_TRUE(s.done());
  EXPECT_FALSE(s.handed_off());
  EXPECT_EQ(s.close_cause()->reason, CloseReason::auth_failed);
  c.on_eof();
  EXPECT_EQ(c.close_cause()->reason, CloseReason::auth_failed);
  for (const auto& e : p.trace) EXPECT_NE(e.message, "error");
}

TEST(Connection, RetryAllowsSecondAttempt) {
  Pair p;
  p.cfg.max_auth_attempts = 2;
  // Client answers the first challenge with garbage, then the retry properly.
  RegistryEnv env(p.cfg, p.clock, p.server_rng, p.spent);
  ServerConnection s(env, p.server_protocols, p.server_rng, p.tracer());
  s.feed(encode_frame(Initialize{{"psk-cr"}, {{"vault", std::nullopt}}}));
  Bytes out = s.take_output();
  FrameReader r;
  r.feed(out);
  ASSERT_TRUE(std::holds_alternative<Authenticate>(r.next()->value()));
  ASSERT_TRUE(std::holds_alternative<AuthData>(r.next()->value()));
  s.feed(encode_frame(AuthData::from_bytes(Bytes(40, 0))));
  r.feed(s.take_output());
  auto retry = r.next();
  ASSERT_TRUE(retry && retry->ok());
  Bytes challenge = std::get<AuthData>(retry->value()).bytes();
  ASSERT_EQ(challenge.size(), kPskChallengeBytes);
  Mac mac = hmac_sha256(test::test_key(), challenge);
  Bytes resp = to_bytes("alice");
  resp.insert(resp.end(), mac.begin(), mac.end());
  s.feed(encode_frame(AuthData::from_bytes(resp)));
  r.feed(s.take_output());
  auto tok = r.next();
  ASSERT_TRUE(tok && tok->ok());
  EXPECT_TRUE(std::holds_alternative<Token>(tok->value()));
}

TEST(Connection, DataBeforeConnectIsRejected) {
  Pair p;
  RegistryEnv env(p.cfg, p.clock, p.server_rng, p.spent);
  ServerConnection s(env, p.server_protocols, p.server_rng);
  Bytes b = encode_frame(Initialize{{"psk-cr"}, {{"echo", std::nullopt}}});
  b.push_back('x');
  s.feed(b);
  EXPECT_FALSE(s.handed_off());
  EXPECT_EQ(s.close_cause()->reason, CloseReason::protocol_violation);
  EXPECT_EQ(s.close_cause()->detail, "data before connect");
}

TEST(Connection, ClientKeepsBytesAfterConnect) {
  Pair p;
  ClientConnection c({{"echo"}, {"psk-cr"}, ClientMode::connect, 0}, {}, std::nullopt, p.client_protocols, p.clock,
                     p.client_rng);
  c.start();
  Bytes b = encode_frame(Connect{"echo"});
  b.push_back('h');
  c.feed(b);
  c.feed(to_bytes("i"));
  ASSERT_TRUE(c.connected());
  EXPECT_EQ(c.take_trailing(), to_bytes("hi"));
}

TEST(Connection, RequestedApplicationRecorded) {
  Pair p;
  RegistryEnv env(p.cfg, p.clock, p.server_rng, p.spent);
  ServerConnection s(env, p.server_protocols, p.server_rng);
  s.feed(encode_frame(Initialize{{"psk-cr"}, {{"ghost", std::nullopt}}}));
  EXPECT_EQ(s.requested_application(), "ghost");
  EXPECT_EQ(s.close_cause()->reason, CloseReason::not_hosted);
}

TEST(Connection, FeedAfterDoneIsIgnored) {
  Pair p;
  RegistryEnv env(p.cfg, p.clock, p.server_rng, p.spent);
  ServerConnection s(env, p.server_protocols, p.server_rng);
  s.feed(encode_frame(Initialize{{"psk-cr"}, {{"ghost", std::nullopt}}}));
  (void)s.take_output();
  s.feed(encode_frame(Connect{"echo"}));
  s.on_eof();
  s.on_timeout();
  EXPECT_FALSE(s.has_output());
}
