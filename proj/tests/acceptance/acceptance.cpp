// Acceptance gate: one PASS/FAIL line per criterion, each with its time budget.

#include "usp/usp.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace usp;
using namespace usp::harness;

namespace {

struct Verdict {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& why) {
    if (!cond && ok) {
      ok = false;
      detail = why;
    }
  }
};

MessageTrace golden(const std::string& name) {
  std::ifstream in(std::string(USP_GOLDEN_DIR) + "/" + name + ".jsonl");
  std::stringstream ss;
  ss << in.rdbuf();
  return trace_from_jsonl(ss.str());
}

std::vector<std::string> names(const MessageTrace& t, unsigned session) {
  std::vector<std::string> out;
  for (const auto& e : t)
    if (e.session == session && e.message != "authdata") out.push_back(e.message);
  return out;
}

Verdict message_counts() {
  Verdict v;
  auto open = run_scenario(*find_scenario("unauthenticated-direct"), TransportKind::memory);
  v.require(count_handshake_messages(open.trace) == 2, "unauthenticated: " + to_string(open.trace));
  v.require(open.trace.size() == 2 && open.trace[0].direction == Direction::client_to_server &&
                open.trace[1].direction == Direction::server_to_client,
            "unauthenticated: not one message each way");
  auto authed = run_scenario(*find_scenario("authenticated-direct"), TransportKind::memory);
  v.require(count_handshake_messages(authed.trace) == 5, "authenticated: " + to_string(authed.trace));
  v.require(names(authed.trace, 0) ==
                std::vector<std::string>{"initialize", "authenticate", "token", "initialize", "connect"},
            "authenticated: wrong message sequence " + to_string(authed.trace));
  v.require(open.handoffs == 1 && authed.handoffs == 1, "handshake did not hand off");
  if (v.ok) v.detail = "unauthenticated=2, authenticated=5 (authdata excluded)";
  return v;
}

Verdict flow_fidelity() {
  Verdict v;
  const std::map<std::string, bool> error_expected = {
      {"unauthenticated-direct", false}, {"authenticated-direct", false}, {"token-passing", false},
      {"no-shared-protocol", true},      {"auth-failure", false},         {"application-not-hosted", true},
      {"malformed-message", true}};
  auto all = canonical_scenarios();
  v.require(all.size() == 7, "expected seven canonical scenarios");
  for (const auto& s : all) {
    auto want = golden(s.name);
    v.require(!want.empty(), s.name + ": golden trace missing");
    auto run = run_scenario(s, TransportKind::memory);
    v.require(run.trace == want, s.name + ": got " + to_string(run.trace) + ", golden " + to_string(want));
    if (auto m = check_scenario(s, run)) v.require(false, s.name + ": " + *m);
    bool has_error =
        std::any_of(run.trace.begin(), run.trace.end(), [](const TraceEntry& e) { return e.message == "error"; });
    v.require(has_error == error_expected.at(s.name), s.name + ": error frame presence is wrong");
  }
  if (v.ok) v.detail = "7/7 golden traces equal";
  return v;
}

Verdict gate_invariant() {
  Verdict v;
  std::size_t sequences = 0;
  try {
    auto strict = enumerate_machine(8);
    sequences += strict.sequences;
    v.require(strict.causes_missing.empty(), "enumeration missed a close reason");
    auto lenient = enumerate_machine(8, {2, true, false});
    sequences += lenient.sequences;
  } catch (const CounterexampleFound& e) {
    v.require(false, std::string("counterexample: ") + e.what());
  }
  // The checker must reject a server that skips token verification.
  bool mutant_caught = false;
  try {
    (void)enumerate_machine(4, {1, false, true});
  } catch (const CounterexampleFound&) {
    mutant_caught = true;
  }
  v.require(mutant_caught, "enumeration failed to catch the token-check mutant");

  auto fuzz = fuzz_malformed(1, 10'000);
  v.require(fuzz.handoffs == 0, "fuzz handoffs=" + std::to_string(fuzz.handoffs));
  v.require(fuzz.crashes == 0, "fuzz crashes=" + std::to_string(fuzz.crashes));
  v.require(fuzz.cases == 10'000, "fuzz ran " + std::to_string(fuzz.cases) + " cases");
  if (v.ok)
    v.detail = "depth 8: " + std::to_string(sequences) + " sequences, 0 violations; fuzz seed 1: 10000 cases, "
               "0 handoffs, 0 crashes";
  return v;
}

Verdict token_suite() {
  Verdict v;
  const Bytes secret = to_bytes("acceptance token secret");
  ManualClock clock(1'800'000'000);
  SeededRandom rng(77);
  std::mt19937_64 gen(78);

  std::size_t random_accepted = 0;
  for (int i = 0; i < 100'000; ++i) {
    std::string s;
    if (i % 2) {
      Bytes b(gen() % 140);
      for (auto& x : b) x = static_cast<std::uint8_t>(gen());
      s = base64_encode(b);
    } else {
      std::size_t n = gen() % 160;
      for (std::size_t k = 0; k < n; ++k) s += static_cast<char>(0x20 + gen() % 95);
    }
    if (verify_token(s, "vault", clock, secret).ok()) ++random_accepted;
  }
  v.require(random_accepted == 0, std::to_string(random_accepted) + " random strings validated");

  const std::int64_t ttl = 300;
  for (int i = 0; i < 50; ++i) {
    clock.set(1'800'000'000 + i * 1000);
    auto t = issue_token("user" + std::to_string(i), "vault", ttl, clock, secret, rng);
    auto text = t.encoded();
    const std::int64_t iat = clock.now();
    for (std::int64_t dt : {std::int64_t{0}, std::int64_t{1}, ttl / 2, ttl - 1}) {
      clock.set(iat + dt);
      v.require(verify_token(text, "vault", clock, secret).ok(), "valid token rejected at +" + std::to_string(dt));
    }
    for (std::int64_t dt : {ttl, ttl + 1, ttl * 10, std::int64_t{-1}}) {
      clock.set(iat + dt);
      auto r = verify_token(text, "vault", clock, secret);
      v.require(!r.ok() && r.error() == TokenError::expired, "token accepted at +" + std::to_string(dt));
    }
    clock.set(iat);
    v.require(!verify_token(text, "http", clock, secret).ok(), "token accepted for another application");
    auto rebound = t;
    rebound.application = "http";
    v.require(!verify_token(rebound.encoded(), "http", clock, secret).ok(), "rebound token accepted");
    Bytes raw = *base64_decode(text);
    for (std::size_t bit = 0; bit < raw.size() * 8; ++bit) {
      Bytes m = raw;
      m[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
      if (verify_token(base64_encode(m), "vault", clock, secret).ok()) {
        v.require(false, "bit flip " + std::to_string(bit) + " accepted");
        break;
      }
    }
  }
  if (v.ok) v.detail = "1e5 random rejected; window [iat, iat+ttl) exact; all bit flips and rebinding rejected";
  return v;
}

std::optional<std::string> first_preference(const std::vector<std::string>& offered,
                                            const std::vector<std::string>& supported) {
  for (const auto& s : supported)
    for (const auto& o : offered)
      if (o == s) return s;
  return std::nullopt;
}

Verdict negotiation_oracle() {
  Verdict v;
  const std::vector<std::string> alphabet{"psk-cr", "x509", "kerberos", "otp"};
  std::vector<std::vector<std::string>> lists{{}};
  for (std::size_t i = 0; i < lists.size(); ++i) {
    if (lists[i].size() == 4) continue;
    for (const auto& a : alphabet)
      if (std::find(lists[i].begin(), lists[i].end(), a) == lists[i].end()) {
        auto next = lists[i];
        next.push_back(a);
        lists.push_back(next);
      }
  }
  std::size_t pairs = 0;
  for (const auto& offered : lists)
    for (const auto& supported : lists) {
      ++pairs;
      auto got = negotiate(offered, supported);
      if (got != first_preference(offered, supported)) {
        v.require(false, "oracle mismatch");
        return v;
      }
      auto perm = offered;
      std::sort(perm.begin(), perm.end());
      do {
        if (negotiate(perm, supported) != got) {
          v.require(false, "result depends on client order");
          return v;
        }
      } while (std::next_permutation(perm.begin(), perm.end()));
    }
  v.detail = std::to_string(lists.size()) + " lists per side, " + std::to_string(pairs) + " pairs";
  return v;
}

Verdict transport_equivalence() {
  Verdict v;
  std::size_t n = 0;
  for (const auto& list : {canonical_scenarios(), extra_scenarios()})
    for (const auto& s : list) {
      auto mem = run_scenario(s, TransportKind::memory);
      auto tcp = run_scenario(s, TransportKind::tcp);
      v.require(mem.trace == tcp.trace, s.name + ": memory " + to_string(mem.trace) + " vs tcp " + to_string(tcp.trace));
      v.require(mem.close_reason == tcp.close_reason && mem.handoffs == tcp.handoffs, s.name + ": outcomes differ");
      ++n;
    }
  if (v.ok) v.detail = std::to_string(n) + " scenarios identical over memory and TCP loopback";
  return v;
}

Verdict token_passing() {
  Verdict v;
  auto run = run_scenario(*find_scenario("token-passing"), TransportKind::memory);
  v.require(run.steps.size() == 2 && !run.steps[0].tokens.empty(), "proxy did not acquire a token");
  v.require(count_handshake_messages(run.trace, 1) == 2, "second client used " +
                                                              std::to_string(count_handshake_messages(run.trace, 1)) +
                                                              " messages");
  v.require(names(run.trace, 1) == std::vector<std::string>{"initialize", "connect"}, to_string(run.trace));
  v.require(run.steps.size() == 2 && run.steps[1].connected && run.steps[1].identity &&
                run.steps[1].identity->identity == "alice",
            "second client not connected as the token's identity");
  v.require(run.handoffs == 1, "expected exactly one handoff");
  if (v.ok) v.detail = "proxy acquired, distinct client connected in 2 messages as alice";
  return v;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    std::string name;
    double budget_s;
    Verdict (*run)();
  };
  const std::vector<Criterion> criteria = {
      {1, "message-count", 1, message_counts},       {2, "flow-fidelity", 5, flow_fidelity},
      {3, "gate-invariant", 60, gate_invariant},     {4, "token-suite", 30, token_suite},
      {5, "negotiation-oracle", 5, negotiation_oracle}, {6, "transport-equivalence", 30, transport_equivalence},
      {7, "token-passing", 1, token_passing},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.ok = false;
      v.detail = std::string("exception: ") + e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    bool in_time = secs < c.budget_s;
    bool pass = v.ok && in_time;
    failed += pass ? 0 : 1;
    std::ostringstream line;
    line.setf(std::ios::fixed);
    line.precision(3);
    line << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.name << ": " << v.detail << " ["
         << secs << " s, budget " << c.budget_s << " s" << (in_time ? "" : ", OVER BUDGET") << "]";
    std::cout << line.str() << std::endl;
  }
  std::cout << (failed ? "FAIL " : "PASS ") << criteria.size() - static_cast<std::size_t>(failed) << "/"
            << criteria.size() << " criteria" << std::endl;
  return failed ? 1 : 0;
}
