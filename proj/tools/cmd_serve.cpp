#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <thread>

#include "cli.hpp"
#include "commands.hpp"
#include "hamil/error.hpp"
#include "hamil/service.hpp"

namespace hamil::cli {

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

int serve(const json& cfg) {
  const MazeAgent agent = MazeAgent::load(input_path(cfg, "model", "maze agent"));
  ServiceOptions opts;
  opts.host = cfg.at("host");
  const long port = cfg.at("port");
  if (port < 0 || port > 65535) throw UsageError("--port must be in 0..65535");
  opts.port = static_cast<int>(port);
  opts.log_dir = optional_path(cfg, "log_dir");
  opts.max_sessions = cfg.at("max_sessions");
  opts.follow_timeout_s = cfg.at("follow_timeout");
  print_header(cfg, nullptr);
  LiveService service(agent, opts);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const int bound = service.start();
  std::printf("model: %s\nlistening: http://%s:%d\n", service.sessions().model_checksum().c_str(), opts.host.c_str(),
              bound);
  std::fflush(stdout);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  service.stop();
  std::printf("stopped\n");
  return 0;
}

}  // namespace

void add_serve(CLI::App& root) {
  json s{{"seed", 42},       {"model", ""},        {"host", "127.0.0.1"},   {"port", 8080},
         {"log_dir", ""},    {"max_sessions", 64}, {"follow_timeout", 300.0}};
  add_command(root, {"serve", "Run the live session service", s, serve});
}

}  // namespace hamil::cli
