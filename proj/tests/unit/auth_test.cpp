#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace usp;

namespace {

// Every ordered selection (no repeats) of up to four names.
std::vector<std::vector<std::string>> ordered_subsets(const std::vector<std::string>& alphabet) {
  std::vector<std::vector<std::string>> out{{}};
  for (std::size_t frontier = 0; frontier < out.size(); ++frontier) {
    auto base = out[frontier];
    if (base.size() == 4) continue;
    for (const auto& a : alphabet)
      if (std::find(base.begin(), base.end(), a) == base.end()) {
        auto next = base;
        next.push_back(a);
        out.push_back(std::move(next));
      }
  }
  return out;
}

std::optional<std::string> oracle(const std::vector<std::string>& offered, const std::vector<std::string>& supported) {
  std::set<std::string> offer(offered.begin(), offered.end());
  for (const auto& s : supported)
    if (offer.count(s)) return s;
  return std::nullopt;
}

struct PskPair {
  SeededRandom rng{3};
  std::unique_ptr<Authenticator> server;
  std::unique_ptr<Authenticator> client;

  PskPair(PskStore store, std::optional<ClientCredentials> creds) {
    auto d = psk_protocol(std::move(store));
    server = d.begin(Role::server, AuthConfig{std::nullopt, &rng});
    client = d.begin(Role::client, AuthConfig{std::move(creds), &rng});
  }
};

}  // namespace

TEST(Negotiate, SpecExamples) {
  std::vector<std::string> server{"psk-cr", "x509"};
  EXPECT_EQ(negotiate(std::vector<std::string>{"x509", "psk-cr"}, server), "psk-cr");
  EXPECT_EQ(negotiate(std::vector<std::string>{"x509"}, server), "x509");
  EXPECT_FALSE(negotiate(std::vector<std::string>{"kerberos"}, server));
  EXPECT_FALSE(negotiate(std::vector<std::string>{}, server));
  EXPECT_FALSE(negotiate(std::vector<std::string>{"psk-cr"}, std::vector<std::string>{}));
}

TEST(Negotiate, MatchesOracleAndIgnoresClientOrder) {
  auto subsets = ordered_subsets({"a", "b", "c", "d"});
  ASSERT_EQ(subsets.size(), 1u + 4 + 12 + 24 + 24);
  for (const auto& offered : subsets) {
    for (const auto& supported : subsets) {
      auto got = negotiate(offered, supported);
      ASSERT_EQ(got, oracle(offered, supported));
      auto perm = offered;
      std::sort(perm.begin(), perm.end());
      do {
        ASSERT_EQ(negotiate(perm, supported), got);
      } while (std::next_permutation(perm.begin(), perm.end()));
    }
  }
}

TEST(Registry, RejectsDuplicatesAndBadNames) {
  ProtocolRegistry r;
  r.add(psk_protocol());
  EXPECT_THROW(r.add(psk_protocol()), std::invalid_argument);
  auto bad = psk_protocol();
  bad.name = "";
  EXPECT_THROW(r.add(bad), std::invalid_argument);
  EXPECT_EQ(r.names(), std::vector<std::string>{"psk-cr"});
  EXPECT_TRUE(r.find("psk-cr"));
  EXPECT_FALSE(r.find("x509"));
}

TEST(Psk, LoopbackSucceedsInTwoFrames) {
  PskPair p({{"alice", test::test_key()}}, ClientCredentials{"alice", test::test_key()});
  auto c0 = p.client->step(std::nullopt);
  EXPECT_TRUE(c0.pending());
  EXPECT_FALSE(c0.outgoing);

  auto s1 = p.server->step(std::nullopt);
  ASSERT_TRUE(s1.outgoing);
  EXPECT_EQ(s1.outgoing->size(), kPskChallengeBytes);
  EXPECT_TRUE(s1.pending());

  auto c1 = p.client->step(ByteView(*s1.outgoing));
  ASSERT_TRUE(c1.outgoing);
  EXPECT_TRUE(c1.succeeded());

  auto s2 = p.server->step(ByteView(*c1.outgoing));
  EXPECT_FALSE(s2.outgoing);
  ASSERT_TRUE(s2.succeeded());
  EXPECT_EQ(std::get<AuthSuccess>(s2.status).identity, "alice");
  EXPECT_THROW(p.server->step(std::nullopt), std::logic_error);
  EXPECT_THROW(p.client->step(std::nullopt), std::logic_error);
}

TEST(Psk, ResponseIsIdentityThenHmacOfChallenge) {
  PskPair p({{"alice", test::test_key()}}, ClientCredentials{"alice", test::test_key()});
  (void)p.client->step(std::nullopt);
  auto challenge = *p.server->step(std::nullopt).outgoing;
  auto response = *p.client->step(ByteView(challenge)).outgoing;
  Mac mac = hmac_sha256(test::test_key(), challenge);
  Bytes expected = to_bytes("alice");
  expected.insert(expected.end(), mac.begin(), mac.end());
  EXPECT_EQ(response, expected);
}

TEST(Psk, WrongKeyFails) {
  Bytes wrong = test::test_key();
  wrong[5] ^= 0x40;
  PskPair p({{"alice", test::test_key()}}, ClientCredentials{"alice", wrong});
  (void)p.client->step(std::nullopt);
  auto ch = *p.server->step(std::nullopt).outgoing;
  auto resp = *p.client->step(ByteView(ch)).outgoing;
  auto verdict = p.server->step(ByteView(resp));
  ASSERT_TRUE(verdict.failed());
  EXPECT_EQ(std::get<AuthFail>(verdict.status).reason, "bad response");
}

TEST(Psk, UnknownIdentityFails) {
  PskPair p({{"alice", test::test_key()}}, ClientCredentials{"mallory", test::test_key()});
  (void)p.client->step(std::nullopt);
  auto ch = *p.server->step(std::nullopt).outgoing;
  auto verdict = p.server->step(ByteView(*p.client->step(ByteView(ch)).outgoing));
  EXPECT_EQ(std::get<AuthFail>(verdict.status).reason, "unknown identity");
}

TEST(Psk, ShortOrReplayedResponsesFail) {
  SeededRandom rng(4);
  auto d = psk_protocol({{"alice", test::test_key()}});
  auto s = d.begin(Role::server, {std::nullopt, &rng});
  (void)s->step(std::nullopt);
  EXPECT_TRUE(s->step(ByteView(Bytes(kMacBytes, 0))).failed());

  // A response for one challenge does not answer the next.
  auto first = d.begin(Role::server, {std::nullopt, &rng});
  auto ch1 = *first->step(std::nullopt).outgoing;
  auto c = d.begin(Role::client, {ClientCredentials{"alice", test::test_key()}, &rng});
  (void)c->step(std::nullopt);
  auto resp1 = *c->step(ByteView(ch1)).outgoing;
  auto second = d.begin(Role::server, {std::nullopt, &rng});
  auto ch2 = *second->step(std::nullopt).outgoing;
  ASSERT_NE(ch1, ch2);
  EXPECT_TRUE(second->step(ByteView(resp1)).failed());
}

TEST(Psk, ServerRejectsInputOnOpeningStep) {
  SeededRandom rng(5);
  auto s = psk_protocol().begin(Role::server, {std::nullopt, &rng});
  Bytes junk{1, 2, 3};
  auto r = s->step(ByteView(junk));
  EXPECT_EQ(std::get<AuthFail>(r.status).reason, "round overflow");
}

TEST(Psk, ClientWithoutCredentialsFails) {
  auto c = psk_protocol().begin(Role::client, {std::nullopt, nullptr});
  (void)c->step(std::nullopt);
  Bytes ch(kPskChallengeBytes, 1);
  EXPECT_EQ(std::get<AuthFail>(c->step(ByteView(ch)).status).reason, "no credentials");
}

TEST(Psk, ClientRejectsBadChallenge) {
  auto c = psk_protocol().begin(Role::client, {ClientCredentials{"alice", test::test_key()}, nullptr});
  (void)c->step(std::nullopt);
  Bytes ch(5, 1);
  EXPECT_EQ(std::get<AuthFail>(c->step(ByteView(ch)).status).reason, "bad challenge");
}

TEST(Psk, ServerNeedsRandomSource) {
  EXPECT_THROW(psk_protocol().begin(Role::server, {std::nullopt, nullptr}), std::invalid_argument);
}

TEST(PskStoreFile, Parse) {
  auto s = parse_psk_store(nlohmann::json::parse(R"({"alice":"00ff","bob":"0102"})"));
  EXPECT_EQ(s.at("alice"), (Bytes{0x00, 0xff}));
  EXPECT_THROW(parse_psk_store(nlohmann::json::parse(R"({"alice":"xyz"})")), std::invalid_argument);
  EXPECT_THROW(parse_psk_store(nlohmann::json::parse(R"({"alice":5})")), std::invalid_argument);
  EXPECT_THROW(parse_psk_store(nlohmann::json::parse(R"(["alice"])")), std::invalid_argument);
  EXPECT_THROW(parse_psk_store(nlohmann::json::parse(R"({"":"00"})")), std::invalid_argument);
}
