// usp: serve, connect, token, scenario and fuzz entry points.
// Exit codes: 0 success, 1 protocol or authentication failure, 2 usage.

#include "usp/usp.hpp"

#include <CLI11/CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <unistd.h>

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

volatile std::sig_atomic_t g_stop = 0;
extern "C" void on_signal(int) { g_stop = 1; }

std::shared_ptr<usp::RandomSource> make_rng(const std::optional<std::uint64_t>& seed) {
  if (seed) return std::make_shared<usp::SeededRandom>(*seed);
  return std::make_shared<usp::OsRandom>();
}

struct AuthFlags {
  std::string auth;
  std::string identity;
  std::string key_file;
  std::string token;
  double timeout = 10;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* cmd, bool with_token) {
    cmd->add_option("--auth", auth, "authentication protocol (psk)");
    cmd->add_option("--identity", identity, "client identity");
    cmd->add_option("--key-file", key_file, "file holding the hex pre-shared key");
    if (with_token) cmd->add_option("--token", token, "identity token from `usp token`");
    cmd->add_option("--timeout", timeout, "handshake timeout in seconds")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", seed, "seed for client randomness");
  }

  usp::ClientOptions options(const std::string& application) const {
    usp::ClientOptions opt;
    opt.handshake_timeout = static_cast<std::int64_t>(timeout + 0.999);
    opt.rng = make_rng(seed);
    if (!token.empty()) {
      opt.tokens[application] = token;
      opt.offered.clear();
    }
    if (!auth.empty()) {
      if (auth != "psk" && auth != usp::kPskProtocol) throw UsageError("unsupported --auth " + auth);
      opt.offered = {std::string(usp::kPskProtocol)};
      if (identity.empty() || key_file.empty()) throw UsageError("--auth psk needs --identity and --key-file");
      std::ifstream in(key_file);
      if (!in) throw UsageError("cannot read key file " + key_file);
      std::string text;
      in >> text;
      auto key = usp::from_hex(text);
      if (!key || key->empty()) throw UsageError("key file " + key_file + " does not hold a hex key");
      opt.credentials = usp::ClientCredentials{identity, *key};
    }
    return opt;
  }
};

int run_serve(const std::string& config_path, const std::string& bind_override,
              const std::optional<std::uint64_t>& seed, double max_seconds) {
  usp::LoadedServerConfig loaded;
  std::unique_ptr<usp::TcpListener> listener;
  std::unique_ptr<usp::Server> server;
  try {
    loaded = usp::load_server_config(config_path);
    usp::ServerRuntime rt;
    rt.rng = make_rng(seed);
    rt.protocols = std::make_shared<const usp::ProtocolRegistry>(std::vector{usp::psk_protocol(loaded.psk)});
    rt.log = [](const std::string& line) { std::cout << line << std::endl; };
    server = std::make_unique<usp::Server>(loaded.config, rt);
    listener = usp::tcp_listen(bind_override.empty() ? loaded.bind : bind_override);
  } catch (const std::exception& e) {
    std::cerr << "usp serve: " << e.what() << "\n";
    return kExitUsage;
  }
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "listening on port " << listener->port() << std::endl;
  auto handle = usp::serve(*listener, *server);
  const auto started = std::chrono::steady_clock::now();
  while (!g_stop) {
    std::this_thread::sleep_for(usp::Millis(50));
    if (max_seconds > 0 && std::chrono::steady_clock::now() - started > std::chrono::duration<double>(max_seconds))
      break;
  }
  handle->shutdown();
  return 0;
}

// Copies the application stream to stdout and stdin to the stream. After
// stdin ends, output keeps flowing until the peer closes or goes quiet.
void bridge(usp::StreamHandle& stream, usp::Millis linger) {
  std::atomic<bool> input_done{false};
  std::thread pump([&] {
    std::array<char, usp::kReadChunkBytes> buf{};
    for (;;) {
      ssize_t n = ::read(STDIN_FILENO, buf.data(), buf.size());
      if (n <= 0) break;
      try {
        stream.write(usp::ByteView(reinterpret_cast<const std::uint8_t*>(buf.data()), static_cast<std::size_t>(n)));
      } catch (const usp::TransportError&) {
        break;
      }
    }
    input_done = true;
  });
  auto quiet_since = std::chrono::steady_clock::now();
  for (;;) {
    std::optional<usp::Bytes> chunk;
    try {
      chunk = stream.read_for(usp::kReadChunkBytes, usp::Millis(20));
    } catch (const usp::TransportError&) {
      break;
    }
    if (chunk && chunk->empty()) break;
    if (chunk) {
      std::cout.write(reinterpret_cast<const char*>(chunk->data()), static_cast<std::streamsize>(chunk->size()));
      std::cout.flush();
      quiet_since = std::chrono::steady_clock::now();
    } else if (input_done && std::chrono::steady_clock::now() - quiet_since > linger) {
      break;
    }
    if (!input_done) quiet_since = std::chrono::steady_clock::now();
  }
  stream.close();
  // The pump may still block on a terminal; it ends with the process.
  pump.detach();
}

int run_connect(const std::string& url, const AuthFlags& flags, double linger_seconds) {
  usp::Target target;
  usp::ClientOptions opt;
  try {
    target = usp::parse_target(url);
    opt = flags.options(target.application);
    if (opt.offered.empty() && opt.tokens.empty()) throw UsageError("give --auth or --token");
  } catch (const std::exception& e) {
    std::cerr << "usp connect: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    auto stream = usp::tcp_dial(target.host, target.port);
    auto session = usp::connect(std::move(stream), target.application, opt);
    std::cerr << session.identity.to_json().dump() << "\n";
    std::cerr << "handshake: " << usp::count_handshake_messages(session.trace) << " messages ("
              << usp::to_string(session.trace) << ")\n";
    bridge(*session.stream, usp::Millis(static_cast<long>(linger_seconds * 1000)));
    return 0;
  } catch (const usp::ClientError& e) {
    std::cerr << "usp connect: " << e.what() << "\n";
  } catch (const usp::TransportError& e) {
    std::cerr << "usp connect: " << e.what() << "\n";
  }
  return kExitFailure;
}

int run_token(const std::string& where, const std::vector<std::string>& apps, const AuthFlags& flags) {
  std::string host;
  std::uint16_t port = usp::kDefaultPort;
  usp::ClientOptions opt;
  try {
    if (where.rfind("usp://", 0) == 0) {
      auto t = usp::parse_target(where.back() == '/' ? where + "x" : where);
      host = t.host;
      port = t.port;
    } else {
      std::tie(host, port) = usp::parse_host_port(where);
    }
    if (flags.auth.empty()) throw UsageError("token needs --auth");
    opt = flags.options(apps.front());
  } catch (const std::exception& e) {
    std::cerr << "usp token: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    auto tokens = usp::acquire_token(usp::tcp_dial(host, port), apps, opt);
    for (const auto& t : tokens) std::cout << t.application << " " << *t.token << "\n";
    return tokens.size() == apps.size() ? 0 : kExitFailure;
  } catch (const usp::ClientError& e) {
    std::cerr << "usp token: " << e.what() << "\n";
  } catch (const usp::TransportError& e) {
    std::cerr << "usp token: " << e.what() << "\n";
  }
  return kExitFailure;
}

int run_scenarios(const std::string& name, const std::string& transport, const std::string& file, bool export_json) {
  using namespace usp::harness;
  std::vector<Scenario> selected;
  try {
    if (!file.empty()) {
      std::ifstream in(file);
      if (!in) throw UsageError("cannot open " + file);
      auto j = nlohmann::json::parse(in, nullptr, false);
      if (j.is_discarded()) throw UsageError(file + " is not valid JSON");
      if (j.is_array())
        for (const auto& s : j) selected.push_back(scenario_from_json(s));
      else
        selected.push_back(scenario_from_json(j));
    } else if (name == "all") {
      selected = canonical_scenarios();
    } else if (name == "extra") {
      selected = extra_scenarios();
    } else if (auto s = find_scenario(name)) {
      selected.push_back(*s);
    } else {
      throw UsageError("unknown scenario " + name);
    }
  } catch (const std::exception& e) {
    std::cerr << "usp scenario: " << e.what() << "\n";
    return kExitUsage;
  }
  if (export_json) {
    auto out = nlohmann::json::array();
    for (const auto& s : selected) out.push_back(to_json(s));
    std::cout << out.dump(2) << "\n";
    return 0;
  }
  std::vector<TransportKind> transports;
  if (transport == "memory" || transport == "both") transports.push_back(TransportKind::memory);
  if (transport == "tcp" || transport == "both") transports.push_back(TransportKind::tcp);

  int failures = 0;
  for (const auto& s : selected) {
    std::optional<usp::MessageTrace> first;
    for (auto t : transports) {
      std::optional<std::string> problem;
      try {
        auto run = run_scenario(s, t);
        problem = check_scenario(s, run);
        if (!problem && first && !(*first == run.trace)) problem = "trace differs between transports";
        first = run.trace;
      } catch (const std::exception& e) {
        problem = e.what();
      }
      std::cout << (problem ? "FAIL " : "PASS ") << s.name << " [" << to_string(t) << "]";
      if (problem) std::cout << ": " << *problem;
      std::cout << "\n";
      failures += problem ? 1 : 0;
    }
  }
  return failures ? kExitFailure : 0;
}

int run_fuzz(std::size_t n, std::uint64_t seed) {
  auto report = usp::harness::fuzz_malformed(seed, n);
  std::cout << report.to_json().dump(2) << "\n";
  return report.passed() ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal Session Protocol agent"};
  app.require_subcommand(1);

  auto* serve = app.add_subcommand("serve", "run a server agent");
  std::string config_path, bind;
  std::optional<std::uint64_t> serve_seed;
  double max_seconds = 0;
  serve->add_option("--config", config_path, "server config JSON")->required();
  serve->add_option("--bind", bind, "host:port, overriding the config");
  serve->add_option("--seed", serve_seed, "seed for server randomness");
  serve->add_option("--max-seconds", max_seconds, "stop after this long (0: until signalled)");

  auto* connect = app.add_subcommand("connect", "connect to an application and bridge it to stdio");
  std::string url;
  AuthFlags connect_flags;
  double linger = 1.0;
  connect->add_option("target", url, "usp://host[:port]/application")->required();
  connect_flags.add_to(connect, true);
  connect->add_option("--linger", linger, "seconds to keep reading after stdin ends");

  auto* token = app.add_subcommand("token", "authenticate and print identity tokens");
  std::string where;
  std::vector<std::string> token_apps;
  AuthFlags token_flags;
  token->add_option("target", where, "host[:port] or usp://host[:port]/")->required();
  token->add_option("--app", token_apps, "application to request a token for")->required();
  token_flags.add_to(token, false);

  auto* scenario = app.add_subcommand("scenario", "run handshake scenarios and check their traces");
  std::string scenario_name = "all", transport = "both", scenario_file;
  scenario->add_option("name", scenario_name, "scenario name, all, or extra");
  scenario->add_option("--transport", transport)->check(CLI::IsMember({"memory", "tcp", "both"}));
  scenario->add_option("--file", scenario_file, "scenario JSON (one object or an array)");
  bool scenario_export = false;
  scenario->add_flag("--export", scenario_export, "print the selected scenarios as JSON instead of running them");

  auto* fuzz = app.add_subcommand("fuzz", "feed malformed input to fresh server sessions");
  std::size_t fuzz_n = 10'000;
  std::uint64_t fuzz_seed = 1;
  fuzz->add_option("--n", fuzz_n, "number of cases")->check(CLI::PositiveNumber);
  fuzz->add_option("--seed", fuzz_seed, "corpus seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (*serve) return run_serve(config_path, bind, serve_seed, max_seconds);
  if (*connect) return run_connect(url, connect_flags, linger);
  if (*token) return run_token(where, token_apps, token_flags);
  if (*scenario) return run_scenarios(scenario_name, transport, scenario_file, scenario_export);
  return run_fuzz(fuzz_n, fuzz_seed);
}
