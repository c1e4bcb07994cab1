#pragma once

#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "hamil/episode.hpp"
#include "hamil/error.hpp"

namespace hamil {

inline constexpr int kWireVersion = 1;
/// Heat maps travel as integers summing to this (4-decimal fixed point).
inline constexpr long kHeatScale = 10000;

/// Largest-remainder rounding of a probability vector to integers summing
/// to `total`; ties go to the lower index.
std::vector<long> quantize_heat(std::span<const double> p, long total = kHeatScale);

/// Wire snapshot of an episode after its latest mutation. `event` names the
/// mutation (create, step, wall, potential, goal, mode).
json episode_snapshot(const Episode& ep, std::uint64_t seq, const std::string& event);

/// Re-executes an event log and returns the snapshot sequence a live session
/// would have streamed for it (seq starting at 0).
std::vector<json> replay_snapshots(const MazeAgent& agent, const std::vector<json>& log);

/// Request errors carry the HTTP status the service answers with.
class RequestError : public Error {
 public:
  RequestError(int status, const std::string& what) : Error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

/// In-memory sessions over one frozen agent. Every mutation of a session is
/// serialized by that session's lock; reads of the snapshot history share it.
class SessionManager {
 public:
  explicit SessionManager(const MazeAgent& agent, std::filesystem::path log_dir = {}, std::size_t max_sessions = 64);

  /// {"seed": n} or {"maze": text}, optional "mode", "script", "budget".
  /// Returns {"session": id, "snapshot": {...}}.
  json create(const json& request);
  json step(const std::string& id);
  /// {"action": "toggle_wall" | "add_potential" | "move_goal", "cell": n or [x, y], "dv": x}
  json edit(const std::string& id, const json& request);
  json set_mode(const std::string& id, const json& request);
  json snapshot(const std::string& id) const;
  /// Snapshots with seq > after (after = -1: all of them), in order.
  std::vector<json> stream(const std::string& id, std::int64_t after = -1) const;
  std::vector<json> history(const std::string& id) const { return stream(id, -1); }
  /// Blocks until a snapshot with seq > after exists, the session is done, or
  /// the timeout passes. Returns true if new snapshots are available.
  bool wait(const std::string& id, std::int64_t after, double timeout_s) const;
  bool done(const std::string& id) const;
  std::string log(const std::string& id) const;
  void close(const std::string& id);
  std::size_t size() const;
  const MazeAgent& agent() const { return agent_; }
  std::string model_checksum() const { return checksum_; }

 private:
  struct Session {
    std::string id;
    std::unique_ptr<Episode> episode;
    std::vector<json> snapshots;
    mutable std::mutex mu;
    mutable std::condition_variable cv;
  };
  std::shared_ptr<Session> find(const std::string& id) const;
  json record(Session& s, const std::string& event);
  json set_mode_locked(Session& s, const json& request);
  void persist(const Session& s) const;

  const MazeAgent& agent_;
  std::string checksum_;
  std::filesystem::path log_dir_;
  std::size_t max_sessions_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_id_ = 1;
};

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path log_dir;
  std::size_t max_sessions = 64;
  double follow_timeout_s = 300.0;  // longest a followed stream stays open
};

/// HTTP front end. start() binds and serves on a background thread until
/// stop(); wait() blocks until then.
class LiveService {
 public:
  LiveService(const MazeAgent& agent, ServiceOptions opts);
  ~LiveService();
  LiveService(const LiveService&) = delete;
  LiveService& operator=(const LiveService&) = delete;

  /// Binds (port 0 picks a free port) and returns the bound port.
  int start();
  void wait();
  void stop();
  int port() const { return port_; }
  SessionManager& sessions() { return sessions_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  SessionManager sessions_;
  ServiceOptions opts_;
  int port_ = 0;
};

}  // namespace hamil
