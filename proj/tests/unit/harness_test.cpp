#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace usp;
using namespace usp::harness;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

MessageTrace golden(const std::string& name) {
  return trace_from_jsonl(slurp(std::string(USP_GOLDEN_DIR) + "/" + name + ".jsonl"));
}

}  // namespace

TEST(Scenarios, SevenCanonicalFlows) {
  auto all = canonical_scenarios();
  ASSERT_EQ(all.size(), 7u);
  for (const auto& s : all) {
    auto g = golden(s.name);
    ASSERT_FALSE(g.empty()) << s.name;
    EXPECT_EQ(s.expected_trace, g) << s.name;
    auto run = run_scenario(s, TransportKind::memory);
    EXPECT_EQ(run.trace, g) << s.name << ": " << to_string(run.trace);
    EXPECT_EQ(check_scenario(s, run), std::nullopt) << s.name;
  }
}

TEST(Scenarios, ErrorFramesOnlyWhereExpected) {
  std::map<std::string, bool> has_error = {{"no-shared-protocol", true},     {"application-not-hosted", true},
                                           {"malformed-message", true},      {"auth-failure", false},
                                           {"unauthenticated-direct", false}, {"authenticated-direct", false},
                                           {"token-passing", false}};
  for (const auto& s : canonical_scenarios()) {
    auto run = run_scenario(s, TransportKind::memory);
    bool error = std::any_of(run.trace.begin(), run.trace.end(), [](const TraceEntry& e) { return e.message == "error"; });
    EXPECT_EQ(error, has_error.at(s.name)) << s.name;
  }
}

TEST(Scenarios, ExtraFlows) {
  for (const auto& s : extra_scenarios()) EXPECT_NO_THROW(assert_scenario(s, TransportKind::memory)) << s.name;
}

TEST(Scenarios, TcpMatchesMemory) {
  for (const auto& s : canonical_scenarios()) {
    auto mem = run_scenario(s, TransportKind::memory);
    auto tcp = run_scenario(s, TransportKind::tcp);
    EXPECT_EQ(mem.trace, tcp.trace) << s.name;
    EXPECT_EQ(mem.close_reason, tcp.close_reason) << s.name;
    EXPECT_EQ(mem.handoffs, tcp.handoffs) << s.name;
  }
}

TEST(Scenarios, RunsAreDeterministic) {
  auto s = *find_scenario("token-passing");
  auto a = run_scenario(s, TransportKind::memory);
  auto b = run_scenario(s, TransportKind::memory);
  EXPECT_EQ(a.trace, b.trace);
  ASSERT_EQ(a.steps.size(), 2u);
  EXPECT_EQ(a.steps[0].tokens, b.steps[0].tokens);
}

TEST(Scenarios, MismatchIsReported) {
  auto s = *find_scenario("auth-failure");
  s.expected_trace.push_back({0, Direction::server_to_client, "error"});
  auto run = run_scenario(s, TransportKind::memory);
  auto why = check_scenario(s, run);
  ASSERT_TRUE(why);
  EXPECT_NE(why->find("entry 4"), std::string::npos) << *why;
  EXPECT_THROW(assert_scenario(s, TransportKind::memory), ScenarioMismatch);

  auto wrong_close = *find_scenario("application-not-hosted");
  wrong_close.expected_close = CloseReason::malformed;
  EXPECT_THROW(assert_scenario(wrong_close, TransportKind::memory), ScenarioMismatch);
}

TEST(Scenarios, JsonRoundTrip) {
  for (auto list : {canonical_scenarios(), extra_scenarios()}) {
    for (const auto& s : list) {
      auto back = scenario_from_json(to_json(s));
      EXPECT_EQ(to_json(back), to_json(s)) << s.name;
      EXPECT_EQ(back.expected_trace, s.expected_trace);
    }
  }
}

TEST(Scenarios, CheckedInScenarioFileMatchesBuiltIns) {
  auto j = nlohmann::json::parse(slurp(std::string(USP_SOURCE_DIR) + "/scenarios/canonical.json"));
  ASSERT_TRUE(j.is_array());
  auto builtin = canonical_scenarios();
  ASSERT_EQ(j.size(), builtin.size());
  for (std::size_t i = 0; i < builtin.size(); ++i) {
    auto s = scenario_from_json(j[i]);
    EXPECT_EQ(to_json(s), to_json(builtin[i])) << builtin[i].name;
  }
}

TEST(Scenarios, BadJsonRejected) {
  EXPECT_THROW(scenario_from_json(nlohmann::json::parse(R"({"name":"x"})")), std::invalid_argument);
  auto j = to_json(canonical_scenarios()[0]);
  j["steps"][0]["op"] = "teleport";
  EXPECT_THROW(scenario_from_json(j), std::invalid_argument);
  j = to_json(canonical_scenarios()[0]);
  j["expected"]["close"] = "meltdown";
  EXPECT_THROW(scenario_from_json(j), std::invalid_argument);
}

TEST(Fuzz, SeededAndReproducible) {
  auto a = fuzz_malformed(5, 500);
  auto b = fuzz_malformed(5, 500);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_TRUE(a.passed());
  EXPECT_EQ(a.cases, 500u);
  for (const auto& [cls, n] : a.per_class) EXPECT_EQ(n, 100u) << cls;
  EXPECT_EQ(a.error_frames + a.silent_closes, 500u);
  EXPECT_GT(a.error_frames, 0u);
  EXPECT_GT(a.silent_closes, 0u);
  EXPECT_NE(fuzz_malformed(6, 500).to_json(), a.to_json());
}

TEST(Fuzz, SchemaMutationsAreInvalid) {
  FuzzInputs inputs(3);
  for (int i = 0; i < 500; ++i) {
    Bytes f = inputs.generate(FuzzClass::wrong_schema);
    auto r = decode_frame(f);
    EXPECT_FALSE(r.ok());
  }
}

TEST(Fuzz, LenientServerAlsoHoldsTheGate) {
  auto server = canonical_server();
  server.lenient_coexistence = true;
  server.max_auth_attempts = 3;
  EXPECT_TRUE(fuzz_malformed(9, 1000, server).passed());
}

TEST(Fuzz, ZeroCasesIsAnError) { EXPECT_THROW(fuzz_malformed(1, 0), std::invalid_argument); }

TEST(Enumeration, ReachesEveryCloseReason) {
  auto r = enumerate_machine(6);
  EXPECT_TRUE(r.causes_missing.empty());
  EXPECT_GT(r.handoffs, 0u);
  EXPECT_EQ(r.phases_reached.size(), 5u);

  auto lenient = enumerate_machine(4, {2, true, false});
  EXPECT_TRUE(lenient.causes_reached.count(CloseReason::ignored_non_usp));
  EXPECT_TRUE(lenient.causes_missing.empty());
}

TEST(Enumeration, CatchesTokenCheckMutant) {
  try {
    (void)enumerate_machine(4, {1, false, true});
    FAIL() << "mutant survived";
  } catch (const CounterexampleFound& e) {
    EXPECT_FALSE(e.events().empty());
    EXPECT_NE(std::string(e.what()).find("vault"), std::string::npos);
  }
}

TEST(Enumeration, DepthLimit) { EXPECT_THROW(enumerate_machine(11), std::invalid_argument); }
