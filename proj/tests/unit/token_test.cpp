#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace usp;

namespace {

const Bytes kSecret = to_bytes("unit test token secret");

struct Fixture {
  ManualClock clock{1'700'000'000};
  SeededRandom rng{21};
  IdentityToken issue(std::string app = "vault", std::int64_t ttl = 3600) {
    return issue_token("alice", std::move(app), ttl, clock, kSecret, rng);
  }
};

// Independent encoding of the documented record layout.
Bytes reference_record(const std::string& id, const std::string& app, std::int64_t iat, std::int64_t exp,
                       const Nonce& nonce) {
  Bytes b{0x01};
  for (const std::string* s : {&id, &app}) {
    b.push_back(static_cast<std::uint8_t>(s->size() / 256));
    b.push_back(static_cast<std::uint8_t>(s->size() % 256));
    for (char c : *s) b.push_back(static_cast<std::uint8_t>(c));
  }
  for (std::int64_t v : {iat, exp}) {
    auto u = static_cast<std::uint64_t>(v);
    for (int i = 7; i >= 0; --i) b.push_back(static_cast<std::uint8_t>((u >> (8 * i)) & 0xFF));
  }
  b.insert(b.end(), nonce.begin(), nonce.end());
  return b;
}

}  // namespace

TEST(Token, LayoutMatchesReferenceEncoding) {
  Fixture f;
  auto t = f.issue();
  Bytes rec = reference_record("alice", "vault", 1'700'000'000, 1'700'003'600, t.nonce);
  EXPECT_EQ(t.signed_record(), rec);
  Mac mac = hmac_sha256(kSecret, rec);
  rec.insert(rec.end(), mac.begin(), mac.end());
  EXPECT_EQ(base64_decode(t.encoded()), rec);
  EXPECT_EQ(rec.size(), 1 + 2 + 5 + 2 + 5 + 8 + 8 + 16 + 32u);
}

TEST(Token, RoundTripParse) {
  Fixture f;
  auto t = f.issue();
  auto p = parse_token(t.encoded());
  ASSERT_TRUE(p);
  EXPECT_EQ(*p, t);
}

TEST(Token, ValidWithinWindowOnly) {
  Fixture f;
  auto t = f.issue("vault", 100);
  auto check = [&] { return verify_token(t.encoded(), "vault", f.clock, kSecret); };
  EXPECT_TRUE(check().ok());
  f.clock.advance(99);
  EXPECT_TRUE(check().ok());
  f.clock.advance(1);
  ASSERT_FALSE(check().ok());
  EXPECT_EQ(check().error(), TokenError::expired);
  f.clock.set(1'700'000'000 - 1);
  EXPECT_EQ(check().error(), TokenError::expired);
}

TEST(Token, ApplicationBinding) {
  Fixture f;
  auto t = f.issue("vault");
  EXPECT_EQ(verify_token(t.encoded(), "http", f.clock, kSecret).error(), TokenError::application_mismatch);
  // Rewriting the application inside the record breaks the signature.
  auto forged = t;
  forged.application = "http";
  EXPECT_EQ(verify_token(forged.encoded(), "http", f.clock, kSecret).error(), TokenError::bad_signature);
}

TEST(Token, EveryBitFlipIsRejected) {
  Fixture f;
  auto t = f.issue();
  Bytes raw = *base64_decode(t.encoded());
  for (std::size_t bit = 0; bit < raw.size() * 8; ++bit) {
    Bytes m = raw;
    m[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    EXPECT_FALSE(verify_token(base64_encode(m), "vault", f.clock, kSecret).ok()) << bit;
  }
}

TEST(Token, WrongSecretRejected) {
  Fixture f;
  auto t = f.issue();
  EXPECT_EQ(verify_token(t.encoded(), "vault", f.clock, to_bytes("other")).error(), TokenError::bad_signature);
}

TEST(Token, RandomStringsNeverValidate) {
  Fixture f;
  std::mt19937_64 rng(22);
  for (int i = 0; i < 10000; ++i) {
    std::string s;
    if (i % 2) {
      s = base64_encode(test::random_bytes(rng, rng() % 120));
    } else {
      std::size_t n = rng() % 150;
      for (std::size_t k = 0; k < n; ++k) s += static_cast<char>(0x20 + rng() % 95);
    }
    EXPECT_FALSE(verify_token(s, "vault", f.clock, kSecret).ok()) << s;
  }
}

TEST(Token, ValidateProducesTokenIdentity) {
  Fixture f;
  auto t = f.issue();
  auto ctx = validate_token(t.encoded(), "vault", f.clock, kSecret);
  ASSERT_TRUE(ctx.ok());
  EXPECT_EQ(ctx->identity, "alice");
  EXPECT_EQ(ctx->application, "vault");
  EXPECT_EQ(ctx->method.kind, AuthMethodKind::token);
}

TEST(Token, NoncesDiffer) {
  Fixture f;
  EXPECT_NE(f.issue().nonce, f.issue().nonce);
}

TEST(Token, IssueRejectsBadInput) {
  Fixture f;
  EXPECT_THROW(issue_token("alice", "vault", 0, f.clock, kSecret, f.rng), std::invalid_argument);
  EXPECT_THROW(issue_token("", "vault", 10, f.clock, kSecret, f.rng), std::invalid_argument);
  EXPECT_THROW(issue_token("alice", "", 10, f.clock, kSecret, f.rng), std::invalid_argument);
}

TEST(Token, ParseRejectsTrailingBytes) {
  Fixture f;
  Bytes raw = *base64_decode(f.issue().encoded());
  raw.push_back(0);
  EXPECT_FALSE(parse_token(base64_encode(raw)));
  raw.resize(raw.size() - 2);
  EXPECT_FALSE(parse_token(base64_encode(raw)));
}

TEST(NonceCache, SingleUseAndExpiry) {
  NonceCache c;
  Nonce a{};
  a[0] = 1;
  EXPECT_TRUE(c.consume(a, 100, 50));
  EXPECT_FALSE(c.consume(a, 100, 60));
  EXPECT_EQ(c.size(), 1u);
  Nonce b{};
  EXPECT_TRUE(c.consume(b, 200, 100));  // prunes a
  EXPECT_EQ(c.size(), 1u);
}

TEST(IdentityContext, JsonShape) {
  auto ctx = IdentityContext::anonymous("echo", 5);
  EXPECT_EQ(ctx.to_json().dump(),
            R"({"application":"echo","authenticated_at":5,"identity":"anonymous","method":"none_required"})");
  EXPECT_EQ((AuthMethod{AuthMethodKind::protocol, "psk-cr"}.label()), "protocol(psk-cr)");
}
